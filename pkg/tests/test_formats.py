import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from acmo import formats
from acmo.adapter import MotionAdapter
from acmo.data import SyntheticDatasetSpec, generate_synthetic_dataset
from acmo.errors import ChecksumError, DataError, FormatError
from acmo.numerics import tensor_digest
from acmo.trajectory import TrajectorySignal, circle_track, init_controlnet

from helpers import TINY_DEN, tiny_denoiser, tiny_vae


def _mixed():
    g = torch.Generator().manual_seed(5)
    return {
        "f32": torch.randn(3, 4, generator=g),
        "f64": torch.randn(2, 2, 2, generator=g, dtype=torch.float64),
        "f16": torch.randn(5, generator=g).half(),
        "i64": torch.arange(-3, 3),
        "i32": torch.tensor([[7, -1]], dtype=torch.int32),
        "u8": torch.tensor([0, 255, 17], dtype=torch.uint8),
        "bool": torch.tensor([True, False, True]),
        "scalar": torch.tensor(3.25),
        "empty": torch.zeros(0, 4),
        "special": torch.tensor([float("nan"), float("inf"), -0.0, 5e-324], dtype=torch.float64),
        "ünïcode.name": torch.ones(1),
    }


def test_container_roundtrip_bitwise_for_every_dtype():
    src = _mixed()
    out = formats.decode_container(formats.encode_container(src))
    assert list(out) == list(src)
    for name, t in src.items():
        assert out[name].dtype == t.dtype and out[name].shape == t.shape
        assert out[name].numpy().tobytes() == t.numpy().tobytes(), name


def test_container_layout_by_hand():
    data = formats.encode_container({"ab": torch.tensor([1.5], dtype=torch.float64)})
    expect = b"ACMO" + struct.pack("<HI", 1, 1) + struct.pack("<H", 2) + b"ab"
    expect += struct.pack("<BB", 2, 1) + struct.pack("<Q", 1) + struct.pack("<d", 1.5)
    assert data[:-8] == expect
    assert struct.unpack("<Q", data[-8:])[0] == formats.checksum(expect)


def test_empty_container_is_valid(tmp_path):
    p = tmp_path / "empty.acmo"
    formats.save_checkpoint({}, p)
    tensors, meta = formats.load_checkpoint(p)
    assert tensors == {} and meta == {}


def test_every_single_byte_corruption_is_detected():
    data = bytearray(formats.encode_container({"w": torch.arange(4.0)}))
    for i in range(4, len(data)):
        bad = bytearray(data)
        bad[i] ^= 0x01
        with pytest.raises((ChecksumError, FormatError)):
            formats.decode_container(bytes(bad))


def test_corrupt_payload_raises_checksum_error(tmp_path):
    p = tmp_path / "w.acmo"
    formats.save_checkpoint({"w": torch.arange(10.0)}, p)
    raw = bytearray(p.read_bytes())
    raw[30] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        formats.load_checkpoint(p)


def test_bad_magic_version_duplicates_and_truncation():
    good = formats.encode_container({"w": torch.ones(2)})
    with pytest.raises(FormatError):
        formats.decode_container(b"NOPE" + good[4:])
    with pytest.raises(FormatError):
        formats.decode_container(good[:6])
    body = bytearray(good[:-8])
    body[4:6] = struct.pack("<H", 9)
    with pytest.raises(FormatError, match="version"):
        formats.decode_container(bytes(body) + struct.pack("<Q", formats.checksum(bytes(body))))
    with pytest.raises(FormatError, match="duplicate"):
        formats.encode_container([("w", torch.ones(1)), ("w", torch.zeros(1))])
    with pytest.raises(FormatError):
        formats.encode_container({"c": torch.ones(1, dtype=torch.complex64)})


def test_missing_checkpoint_is_data_error(tmp_path):
    with pytest.raises(DataError):
        formats.load_checkpoint(tmp_path / "nope.acmo")


def test_meta_roundtrip_and_reserved_name(tmp_path):
    p = tmp_path / "m.acmo"
    formats.save_checkpoint({"w": torch.ones(1)}, p, meta={"kind": "x", "n": 3})
    _, meta = formats.load_checkpoint(p)
    assert meta == {"kind": "x", "n": 3}
    with pytest.raises(FormatError):
        formats.save_checkpoint({formats.META_ENTRY: torch.ones(1)}, p, meta={})


def test_save_returns_file_sha256(tmp_path):
    p = tmp_path / "w.acmo"
    digest = formats.save_checkpoint({"w": torch.ones(3)}, p)
    assert digest == formats.file_digest(p)


def test_models_roundtrip(tmp_path):
    vae, den = tiny_vae(), tiny_denoiser()
    formats.save_model(vae, tmp_path / "vae.acmo", "vae")
    formats.save_model(den, tmp_path / "den.acmo", "denoiser")
    assert formats.state_digest(formats.load_vae(tmp_path / "vae.acmo")) == formats.state_digest(vae)
    loaded, sched = formats.load_denoiser(tmp_path / "den.acmo")
    assert formats.state_digest(loaded) == formats.state_digest(den)
    assert sched.K == den.cfg.K
    with pytest.raises(DataError, match="expected"):
        formats.load_vae(tmp_path / "den.acmo")


def test_adapter_roundtrip_and_base_check(tmp_path):
    den = tiny_denoiser()
    torch.manual_seed(3)
    adapter = MotionAdapter(TINY_DEN, "c").double()
    with torch.no_grad():
        for p in adapter.parameters():
            p.add_(torch.randn_like(p))
    formats.save_adapter(adapter, tmp_path / "ad.acmo", formats.state_digest(den))
    back, model = formats.load_adapter(tmp_path / "ad.acmo", den)
    assert model is den
    assert formats.state_digest(back) == formats.state_digest(adapter)
    with pytest.raises(DataError, match="different base"):
        formats.load_adapter(tmp_path / "ad.acmo", tiny_denoiser(seed=9))


def test_mode_b_adapter_carries_retrained_tensors(tmp_path):
    den = tiny_denoiser()
    tuned = tiny_denoiser()
    with torch.no_grad():
        tuned.blocks[0].self_attn.q.weight.add_(1.0)
    adapter = MotionAdapter(TINY_DEN, "b").double()
    formats.save_adapter(adapter, tmp_path / "b.acmo", formats.state_digest(den), tuned_base=tuned)
    _, model = formats.load_adapter(tmp_path / "b.acmo", den)
    assert model is not den
    assert formats.state_digest(model) == formats.state_digest(tuned)
    assert formats.state_digest(den) != formats.state_digest(tuned)
    with pytest.raises(DataError, match="required"):
        formats.load_adapter(tmp_path / "b.acmo")


def test_controlnet_roundtrip(tmp_path):
    den = tiny_denoiser()
    cnet = init_controlnet(den).double()
    with torch.no_grad():
        cnet.zero_proj[0].weight.add_(0.5)
    formats.save_model(cnet, tmp_path / "c.acmo", "controlnet", extra={"base_digest": formats.state_digest(den), "joints": 1})
    back = formats.load_controlnet(tmp_path / "c.acmo", den)
    assert formats.state_digest(back) == formats.state_digest(cnet)
    with pytest.raises(DataError):
        formats.load_controlnet(tmp_path / "c.acmo", tiny_denoiser(seed=4))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
                  elements=st.floats(allow_nan=False, width=64)))
def test_motion_text_roundtrip_is_lossless(m):
    back = formats.parse_motion(formats.format_motion(m))
    assert back.shape == m.shape
    assert back.tobytes() == m.tobytes()


def test_motion_text_layout_and_errors(tmp_path):
    m = np.array([[0.1, -2.0], [3.0, 1e-300]])
    text = formats.format_motion(m)
    assert text.splitlines()[0] == "2 2"
    assert text.splitlines()[1] == "0.10000000000000001 -2"
    formats.write_motion(tmp_path / "m.txt", m)
    assert np.array_equal(formats.read_motion(tmp_path / "m.txt"), m)
    for bad in ("", "2 2\n1 2\n", "1 2\n1 x\n", "1 2\n1 2 3\n"):
        with pytest.raises(FormatError):
            formats.parse_motion(bad)
    with pytest.raises(FormatError):
        formats.format_motion(np.zeros(3))


def test_trajectory_text_roundtrip(tmp_path):
    sig = circle_track(10)
    sig.mask[3] = False
    formats.write_trajectory(tmp_path / "t.txt", sig)
    back = formats.read_trajectory(tmp_path / "t.txt")
    assert back.points.tobytes() == sig.points.tobytes()
    assert np.array_equal(back.mask, sig.mask)
    text = (tmp_path / "t.txt").read_text()
    assert text.splitlines()[3].endswith(" 0")
    assert formats.parse_trajectory("# comment\n" + text).length == 10


@pytest.mark.parametrize("bad", ["", "0 1 2 3\n", "1 0 0 0 1\n", "0 0 0 0 2\n", "0 a 0 0 1\n"])
def test_trajectory_parse_errors(bad):
    with pytest.raises(FormatError):
        formats.parse_trajectory(bad)


def test_trajectory_file_carries_one_joint():
    with pytest.raises(FormatError):
        formats.format_trajectory(TrajectorySignal(np.zeros((3, 2, 3)), np.ones((3, 2), bool)))


def test_manifest_records_digests(tmp_path):
    f = tmp_path / "in.bin"
    f.write_bytes(b"abc")
    man = formats.write_manifest(tmp_path / "man.json", "x", {"b": 1, "a": [2]}, 7, inputs=[f], extra={"k": 1})
    on_disk = json.loads((tmp_path / "man.json").read_text())
    assert on_disk == man
    assert man["inputs"][str(f)] == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert man["config_digest"] == formats.config_digest({"a": [2], "b": 1})
    assert man["seed"] == 7 and man["k"] == 1


def test_dataset_roundtrip(tmp_path):
    ds = generate_synthetic_dataset(SyntheticDatasetSpec(per_family=1, length_range=(6, 6), styles=("base", "amplitude")))
    formats.save_dataset(ds, tmp_path / "ds")
    back = formats.load_dataset(tmp_path / "ds")
    assert back.digest() == ds.digest()
    assert back.captions() == ds.captions()
    assert [c.style for c in back.clips] == [c.style for c in ds.clips]
    assert len(formats.dataset_files(tmp_path / "ds")) == len(ds) + 1


def test_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        formats.load_dataset(tmp_path)
    (tmp_path / formats.DATASET_INDEX).write_text("\n")
    with pytest.raises(DataError, match="empty"):
        formats.load_dataset(tmp_path)
    (tmp_path / formats.DATASET_INDEX).write_text("{not json}\n")
    with pytest.raises(FormatError):
        formats.load_dataset(tmp_path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    formats.atomic_write(tmp_path / "sub" / "f.bin", b"one")
    formats.atomic_write(tmp_path / "sub" / "f.bin", b"two")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.bin"]
    assert (tmp_path / "sub" / "f.bin").read_bytes() == b"two"


def test_tensor_digest_survives_roundtrip():
    src = _mixed()
    out = formats.decode_container(formats.encode_container(src))
    for name in src:
        if name != "special":
            assert tensor_digest(out[name]) == tensor_digest(src[name])
