import json
from pathlib import Path

import numpy as np
import pytest

from acmo import formats
from acmo.cli import UsageError, default_config, load_config, main
from acmo.errors import DataError
from acmo.trajectory import circle_track

FIXTURES = Path(__file__).parent / "fixtures"

TINY = {
    "dataset": {"per_family": 2, "length_range": [12, 12], "styles": ["base", "amplitude"]},
    "vae": {"latent_tokens": 2, "latent_dim": 8, "width": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1, "max_len": 48},
    "vae_train": {"steps": 3, "batch_size": 4},
    "denoiser": {"latent_tokens": 2, "latent_dim": 8, "width": 16, "heads": 2, "layers": 2, "K": 50},
    "adm_train": {"steps": 3, "batch_size": 4},
    "adapter_train": {"epochs": 1, "batch_size": 8},
    "control_train": {"steps": 2, "batch_size": 4},
    "guidance": {"steps": 5},
}


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def stage(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", cfg]
    assert run("synth", *c, "--out", root / "data") == 0
    assert run("train-vae", *c, "--data", root / "data", "--out", root / "vae.acmo") == 0
    assert run("train-adm", *c, "--data", root / "data", "--vae", root / "vae.acmo", "--out", root / "den.acmo") == 0
    return root, c


def test_config_layering(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 5, "vae": {"width": 32}}))
    cfg = load_config(str(f), ["vae.width=64", "guidance.sampler=ancestral", "dataset.styles=[\"base\"]"])
    assert cfg["seed"] == 5 and cfg["vae"]["width"] == 64
    assert cfg["guidance"]["sampler"] == "ancestral" and cfg["dataset"]["styles"] == ["base"]
    assert cfg["vae"]["heads"] == default_config()["vae"]["heads"]
    with pytest.raises(UsageError):
        load_config(None, ["vae.nope=1"])
    with pytest.raises(UsageError):
        load_config(None, ["novalue"])
    with pytest.raises(DataError):
        load_config(str(tmp_path / "missing.json"), [])


def test_synth_is_deterministic(tmp_path, stage):
    root, c = stage
    assert run("synth", *c, "--out", tmp_path / "again") == 0
    assert formats.load_dataset(tmp_path / "again").digest() == formats.load_dataset(root / "data").digest()
    man = json.loads((root / "data" / "manifest.json").read_text())
    assert man["command"] == "synth" and man["clips"] == 20


def test_training_manifests(stage):
    root, _ = stage
    man = json.loads((root / "den.acmo.manifest.json").read_text())
    assert man["command"] == "train-adm" and man["seed"] == 1234
    assert man["inputs"][str(root / "vae.acmo")] == formats.file_digest(root / "vae.acmo")
    assert man["outputs"][str(root / "den.acmo")] == formats.file_digest(root / "den.acmo")
    assert np.isfinite(man["final_loss"])


def test_sample_twice_gives_identical_files(tmp_path, stage):
    root, c = stage
    outs = []
    for name in ("s1", "s2"):
        assert run("sample", *c, "--text", "a person walks forward slowly", "--seed", 1234, "--vae", root / "vae.acmo",
                   "--base", root / "den.acmo", "--length", 12, "--repeat", 2, "--out", tmp_path / name) == 0
        outs.append(tmp_path / name)
    files = sorted(p.name for p in outs[0].glob("sample_*.txt"))
    assert files == ["sample_000.txt", "sample_001.txt"]
    for f in files + ["samples.jsonl"]:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    m = formats.read_motion(outs[0] / files[0])
    assert m.shape == (12, 263)
    assert not np.array_equal(m, formats.read_motion(outs[0] / files[1]))


def test_sample_does_not_touch_inputs(tmp_path, stage):
    root, c = stage
    before = {p: formats.file_digest(root / p) for p in ("vae.acmo", "den.acmo")}
    assert run("sample", *c, "--text", "x", "--vae", root / "vae.acmo", "--base", root / "den.acmo",
               "--length", 12, "--out", tmp_path / "s") == 0
    assert before == {p: formats.file_digest(root / p) for p in before}


def test_finetune_mode_c_records_frozen_digests(tmp_path, stage):
    root, c = stage
    out = tmp_path / "ad.acmo"
    assert run("finetune-adapter", *c, "--mode", "c", "--data", root / "data", "--vae", root / "vae.acmo",
               "--base", root / "den.acmo", "--out", out) == 0
    man = json.loads(out.with_name(out.name + ".manifest.json").read_text())
    assert man["frozen_match"] is True
    assert man["frozen_digests"] == man["base_checkpoint_digests"]
    assert len(man["frozen_digests"]) > 0
    assert all(not n.startswith("denoiser.") for n in man["trainable"])
    style = root / "data" / "motions" / "00001.txt"
    assert run("sample", *c, "--text", "a person walks", "--vae", root / "vae.acmo", "--base", root / "den.acmo",
               "--adapter", out, "--style-prompt", style, "--length", 12, "--out", tmp_path / "styled") == 0
    assert (tmp_path / "styled" / "sample_000.txt").is_file()


def test_controlnet_and_trajectory_sampling(tmp_path, stage):
    root, c = stage
    out = tmp_path / "cn.acmo"
    assert run("train-controlnet", *c, "--data", root / "data", "--vae", root / "vae.acmo",
               "--base", root / "den.acmo", "--out", out) == 0
    formats.write_trajectory(tmp_path / "t.txt", circle_track(12))
    assert run("sample", *c, "--text", "a person walks in a circle", "--vae", root / "vae.acmo", "--base", root / "den.acmo",
               "--controlnet", out, "--traj", tmp_path / "t.txt", "--out", tmp_path / "traj") == 0
    assert formats.read_motion(tmp_path / "traj" / "sample_000.txt").shape == (12, 263)
    assert run("sample", *c, "--text", "x", "--vae", root / "vae.acmo", "--base", root / "den.acmo",
               "--controlnet", out, "--traj", tmp_path / "t.txt", "--length", 20, "--out", tmp_path / "bad") == 2


def test_eval_identical_sets_reports_zero_fid(tmp_path, stage):
    root, c = stage
    out = tmp_path / "report.json"
    assert run("eval", *c, "--real", root / "data", "--gen", root / "data", "--out", out, "--csv", tmp_path / "r.csv",
               "--batch", 4) == 0
    report = json.loads(out.read_text())
    assert abs(report["fid"]) < 1e-8
    assert 0.0 <= report["r_precision_1"] <= report["r_precision_3"] <= 1.0
    assert (tmp_path / "r.csv").read_text().count("\n") == 2


def test_exit_codes(tmp_path, stage, capsys):
    root, c = stage
    assert run("bogus") == 1
    assert run("sample", "--text", "x") == 1
    assert run("synth", "--out", tmp_path / "o", "--set", "nope=1") == 1
    assert run("sample", "--text", "x", "--vae", root / "vae.acmo", "--base", root / "den.acmo",
               "--style-prompt", "m.txt", "--out", tmp_path / "o") == 1
    assert run("train-vae", "--data", tmp_path / "nothing", "--out", tmp_path / "v.acmo") == 2
    assert run("sample", "--text", "x", "--vae", tmp_path / "missing.acmo", "--base", root / "den.acmo",
               "--out", tmp_path / "o") == 2
    assert run("sample", "--text", "x", "--vae", root / "den.acmo", "--base", root / "den.acmo",
               "--out", tmp_path / "o") == 2
    nan_cfg = tmp_path / "nan.json"
    nan_cfg.write_text(json.dumps({**TINY, "vae_train": {"steps": 2, "batch_size": 4, "lr": 1e30}}))
    assert run("train-vae", "--config", nan_cfg, "--data", root / "data", "--out", tmp_path / "v.acmo") == 3
    assert "error" in capsys.readouterr().err


def test_wordbank_plan_and_judge(tmp_path, capsys):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("a person walks forward\na person turns left and walks\na person raises the right hand\n")
    bank = tmp_path / "bank.tsv"
    assert run("wordbank", "--corpus", corpus, "--out", bank, "--top-n", 3) == 0
    words = [ln.split("\t")[0] for ln in bank.read_text().splitlines()]
    assert len(words) == 3 and "person" in words

    assert run("plan", "--fixture", FIXTURES / "plans.jsonl", "--sequential", "--instruction", "walk",
               "--instruction", "turn", "--instruction", "wave", "--out", tmp_path / "plans.jsonl") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert json.loads(lines[-1])["art_s"] == pytest.approx(0.02)
    assert len((tmp_path / "plans.jsonl").read_text().splitlines()) == 3

    inp = tmp_path / "outputs.txt"
    inp.write_text("one\ntwo\nthree\nfour\n")
    assert run("judge", "--kind", "rule", "--fixture", FIXTURES / "rule_verdicts.jsonl", "--sequential", "--input", inp) == 0
    assert json.loads(capsys.readouterr().out)["rcs"] == pytest.approx(0.75)

    items = tmp_path / "items.jsonl"
    items.write_text("".join(json.dumps({"instruction": f"i{k}", "candidates": {c: c.lower() for c in "ABCDE"}}) + "\n"
                             for k in range(3)))
    assert run("judge", "--kind", "rank", "--label", "A", "--fixture", FIXTURES / "rankings.jsonl", "--sequential",
               "--input", items) == 0
    assert json.loads(capsys.readouterr().out)["ps"] == pytest.approx(2.0)
    assert run("judge", "--kind", "rank", "--fixture", FIXTURES / "rankings.jsonl", "--input", items) == 1
    assert run("plan", "--fixture", FIXTURES / "plans.jsonl") == 1
