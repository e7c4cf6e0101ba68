"""On-disk formats: checkpoint container, motion/trajectory text files, run manifests."""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ChecksumError, DataError, FormatError

MAGIC = b"ACMO"
VERSION = 1
META_ENTRY = "__meta__"

DTYPE_CODES = {
    torch.float32: 1,
    torch.float64: 2,
    torch.int64: 3,
    torch.bool: 4,
    torch.uint8: 5,
    torch.int32: 6,
    torch.float16: 7,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def encode_container(tensors: dict[str, Tensor] | list[tuple[str, Tensor]]) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(items))
    for name, t in items:
        t = t.detach().cpu().contiguous()
        if t.dtype not in DTYPE_CODES:
            raise FormatError(f"unsupported dtype {t.dtype} for {name!r}")
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<BB", DTYPE_CODES[t.dtype], t.dim())
        out += struct.pack(f"<{t.dim()}Q", *t.shape)
        arr = t.numpy()
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    out += struct.pack("<Q", checksum(bytes(out)))
    return bytes(out)


def decode_container(data: bytes) -> dict[str, Tensor]:
    if len(data) < len(MAGIC) + 6 + 8 or data[:4] != MAGIC:
        raise FormatError("not an ACMO container")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if checksum(body) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise FormatError(f"unknown container version {version}")
    pos = 10
    out: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dtype = CODE_DTYPES[code]
            np_dtype = torch.empty((), dtype=dtype).numpy().dtype.newbyteorder("<")
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = n * np_dtype.itemsize
            if pos + nbytes > len(body):
                raise FormatError("truncated tensor payload")
            arr = np.frombuffer(body, dtype=np_dtype, count=n, offset=pos).reshape(dims)
            pos += nbytes
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed container: {e}") from e
    if pos != len(body):
        raise FormatError("trailing bytes in container")
    return out


def save_checkpoint(tensors: dict[str, Tensor], path: str | Path, meta: dict | None = None) -> str:
    """Write atomically; returns the sha256 of the file bytes."""
    items = dict(tensors)
    if meta is not None:
        if META_ENTRY in items:
            raise FormatError(f"{META_ENTRY!r} is reserved")
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        items[META_ENTRY] = torch.tensor(list(raw), dtype=torch.uint8)
    data = encode_container(items)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing checkpoint {p}")
    tensors = decode_container(p.read_bytes())
    meta = {}
    if META_ENTRY in tensors:
        meta = json.loads(bytes(tensors.pop(META_ENTRY).tolist()).decode("utf-8"))
    return tensors, meta


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model helpers
# ---------------------------------------------------------------------------


def state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_model(module: nn.Module, path, kind: str, extra: dict | None = None) -> str:
    meta = {"kind": kind, "config": asdict(module.cfg), "dtype": str(next(module.parameters()).dtype)}
    meta.update(extra or {})
    return save_checkpoint(module.state_dict(), path, meta)


def _check_kind(meta: dict, kind: str, path) -> None:
    if meta.get("kind") != kind:
        raise DataError(f"{path} holds {meta.get('kind')!r}, expected {kind!r}")


def _load_into(module: nn.Module, tensors: dict[str, Tensor], meta: dict) -> nn.Module:
    dtype = getattr(torch, meta.get("dtype", "torch.float32").split(".")[-1])
    module = module.to(dtype)
    missing, unexpected = module.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise FormatError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
    return module.eval()


def load_vae(path):
    from .vae import MotionVAE, VAEConfig

    tensors, meta = load_checkpoint(path)
    _check_kind(meta, "vae", path)
    return _load_into(MotionVAE(VAEConfig(**meta["config"])), tensors, meta)


def load_denoiser(path):
    from .diffusion import Denoiser, DenoiserConfig

    tensors, meta = load_checkpoint(path)
    _check_kind(meta, "denoiser", path)
    model = _load_into(Denoiser(DenoiserConfig(**meta["config"])), tensors, meta)
    return model, model.schedule()


def save_adapter(adapter, path, base_digest: str, tuned_base=None) -> str:
    """Adapter tensors plus, for base-retraining modes, the retrained base tensors."""
    from .adapter import partition_parameters

    tensors = {f"adapter.{n}": t for n, t in adapter.state_dict().items()}
    if tuned_base is not None:
        part = partition_parameters(tuned_base, adapter.mode, adapter)
        state = tuned_base.state_dict()
        for name in sorted(part.trainable):
            if name.startswith("denoiser."):
                tensors[name] = state[name[len("denoiser.") :]]
    meta = {
        "kind": "adapter",
        "mode": adapter.mode,
        "config": asdict(adapter.cfg),
        "base_digest": base_digest,
        "dtype": str(next(iter(tensors.values()), torch.zeros(())).dtype),
    }
    return save_checkpoint(tensors, path, meta)


def load_adapter(path, base=None):
    """Returns (adapter, denoiser): the denoiser is ``base`` or a retrained copy of it."""
    import copy

    from .adapter import MotionAdapter
    from .diffusion import DenoiserConfig

    tensors, meta = load_checkpoint(path)
    _check_kind(meta, "adapter", path)
    if base is not None and meta.get("base_digest") not in (None, state_digest(base)):
        raise DataError("adapter was trained against a different base denoiser")
    own = {n[len("adapter.") :]: t for n, t in tensors.items() if n.startswith("adapter.")}
    over = {n[len("denoiser.") :]: t for n, t in tensors.items() if n.startswith("denoiser.")}
    adapter = _load_into(MotionAdapter(DenoiserConfig(**meta["config"]), meta["mode"]), own, meta)
    model = base
    if over:
        if base is None:
            raise DataError("this adapter retrains base tensors; the base denoiser is required")
        model = copy.deepcopy(base)
        state = model.state_dict()
        state.update(over)
        model.load_state_dict(state)
        model.eval()
    return adapter, model


def load_controlnet(path, base):
    from .trajectory import ControlNet

    tensors, meta = load_checkpoint(path)
    _check_kind(meta, "controlnet", path)
    if meta.get("base_digest") not in (None, state_digest(base)):
        raise DataError("controlnet was trained against a different base denoiser")
    return _load_into(ControlNet(base, meta.get("joints", 1)), tensors, meta)


# ---------------------------------------------------------------------------
# motion and trajectory text files
# ---------------------------------------------------------------------------


def format_motion(m: np.ndarray) -> str:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError("motion must be 2-D")
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in m]
    return "\n".join(lines) + "\n"


def parse_motion(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty motion file")
    try:
        L, H = (int(v) for v in lines[0].split())
        rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    except ValueError as e:
        raise FormatError(f"bad motion file: {e}") from e
    if len(rows) != L or any(len(r) != H for r in rows):
        raise FormatError(f"motion body does not match header {L} x {H}")
    return np.array(rows, dtype=np.float64).reshape(L, H)


def write_motion(path, m: np.ndarray) -> None:
    atomic_write(path, format_motion(m).encode())


def read_motion(path) -> np.ndarray:
    return parse_motion(Path(path).read_text())


def format_trajectory(signal) -> str:
    """One line per frame: ``frame x y z mask`` for the single controlled joint."""
    if signal.points.shape[1] != 1:
        raise FormatError("trajectory files carry one joint")
    lines = []
    for f in range(signal.length):
        x, y, z = signal.points[f, 0]
        lines.append(f"{f} {x:.17g} {y:.17g} {z:.17g} {int(signal.mask[f, 0])}")
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str):
    from .trajectory import TrajectorySignal

    pts, mask = [], []
    for n, ln in enumerate((ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#"))):
        parts = ln.split()
        if len(parts) != 5:
            raise FormatError(f"trajectory line {n}: expected 5 fields")
        try:
            frame = int(parts[0])
            xyz = [float(v) for v in parts[1:4]]
            bit = int(parts[4])
        except ValueError as e:
            raise FormatError(f"trajectory line {n}: {e}") from e
        if frame != n or bit not in (0, 1):
            raise FormatError(f"trajectory line {n}: bad frame index or mask bit")
        pts.append(xyz)
        mask.append(bool(bit))
    if not pts:
        raise FormatError("empty trajectory file")
    return TrajectorySignal(np.array(pts)[:, None, :], np.array(mask)[:, None])


def write_trajectory(path, signal) -> None:
    atomic_write(path, format_trajectory(signal).encode())


def read_trajectory(path):
    return parse_trajectory(Path(path).read_text())


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(path, command: str, config: dict, seed: int, inputs=(), outputs=(), extra: dict | None = None) -> dict:
    man = {
        "command": command,
        "config": config,
        "config_digest": config_digest(config),
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs},
    }
    man.update(extra or {})
    atomic_write(path, (json.dumps(man, indent=2, sort_keys=True) + "\n").encode())
    return man


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

DATASET_INDEX = "index.jsonl"


def save_dataset(dataset, root) -> list[Path]:
    """``root/index.jsonl`` plus one motion file per clip; returns written paths."""
    root = Path(root)
    written = []
    lines = []
    for i, c in enumerate(dataset.clips):
        rel = f"motions/{i:05d}.txt"
        write_motion(root / rel, c.motion)
        written.append(root / rel)
        rec = {"file": rel, "caption": c.caption, "family": c.family, "variant": c.variant, "style": c.style}
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write(root / DATASET_INDEX, ("\n".join(lines) + "\n").encode())
    written.append(root / DATASET_INDEX)
    return written


def load_dataset(root):
    from .data import MotionClip, MotionDataset, hip_track

    root = Path(root)
    index = root / DATASET_INDEX
    if not index.is_file():
        raise DataError(f"no dataset index at {index}")
    clips = []
    for n, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            m = read_motion(root / rec["file"])
            clips.append(MotionClip(m, rec["caption"], rec["family"], rec["variant"], rec["style"], hip_track(m)))
        except (json.JSONDecodeError, KeyError) as e:
            raise FormatError(f"{index}:{n}: bad record") from e
    if not clips:
        raise DataError(f"dataset at {root} is empty")
    return MotionDataset(clips)


def dataset_files(root) -> list[Path]:
    root = Path(root)
    files = [root / DATASET_INDEX]
    for line in (root / DATASET_INDEX).read_text().splitlines():
        if line.strip():
            files.append(root / json.loads(line)["file"])
    return files
