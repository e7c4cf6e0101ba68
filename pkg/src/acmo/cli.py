"""Command-line entry point: ``acmo <command> [options]``."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import formats
from .adapter import AdapterTrainConfig, finetune_adapter, named_tensors, partition_parameters, style_from_motion
from .data import SyntheticDatasetSpec, generate_synthetic_dataset
from .diffusion import ADMTrainConfig, DenoiserConfig, GuidanceConfig, sample, train_adm
from .errors import AcmoError, DataError
from .eval import MetricReport, diversity, feature_set, fid, retrieval_metrics
from .diffusion import text_encode_stub
from .numerics import tensor_digest
from .planner import (
    FixturePlayer,
    HTTPClient,
    PlannerConfig,
    WordBank,
    average_response_time,
    build_word_bank,
    judge_ps,
    judge_rcs,
    plan_many,
)
from .trajectory import ControlTrainConfig, train_controlnet
from .vae import VAEConfig, VAETrainConfig, train_vae

log = logging.getLogger("acmo")


class UsageError(AcmoError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def default_config() -> dict:
    return {
        "seed": 1234,
        "dataset": asdict(SyntheticDatasetSpec()),
        "vae": asdict(VAEConfig()),
        "vae_train": asdict(VAETrainConfig()),
        "denoiser": asdict(DenoiserConfig()),
        "adm_train": asdict(ADMTrainConfig()),
        "adapter_train": asdict(AdapterTrainConfig()),
        "control_train": asdict(ControlTrainConfig()),
        "guidance": asdict(GuidanceConfig()),
        "planner": asdict(PlannerConfig()),
    }


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, sets: list[str] | None) -> dict:
    """Defaults, then the JSON file, then ``section.key=value`` overrides."""
    cfg = default_config()
    if path:
        try:
            _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config {path}: {e}") from e
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        *parents, leaf = key.split(".")
        nested = {leaf: _parse_value(value)}
        for p in reversed(parents):
            nested = {p: nested}
        _merge(cfg, nested)
    return cfg


def _tuples(d: dict, *keys) -> dict:
    d = dict(d)
    for k in keys:
        if k in d and isinstance(d[k], list):
            d[k] = tuple(d[k])
    return d


def _guidance(cfg: dict, args) -> GuidanceConfig:
    g = dict(cfg["guidance"])
    if getattr(args, "gs", None) is not None:
        g["w"] = args.gs
    if getattr(args, "steps", None) is not None:
        g["steps"] = args.steps
    return GuidanceConfig(**g)


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg):
    spec = SyntheticDatasetSpec(**_tuples(cfg["dataset"], "families", "length_range", "styles"))
    ds = generate_synthetic_dataset(spec)
    out = Path(args.out)
    written = formats.save_dataset(ds, out)
    formats.write_manifest(out / "manifest.json", "synth", cfg, spec.seed, outputs=[out / formats.DATASET_INDEX],
                           extra={"dataset_digest": ds.digest(), "clips": len(ds)})
    print(f"wrote {len(ds)} clips ({len(written) - 1} motion files) to {out}")


def cmd_train_vae(args, cfg):
    ds = formats.load_dataset(args.data)
    vae, hist = train_vae(ds, VAEConfig(**cfg["vae"]), VAETrainConfig(**cfg["vae_train"]), seed=cfg["seed"])
    out = Path(args.out)
    formats.save_model(vae, out, "vae")
    formats.write_manifest(_manifest_path(out), "train-vae", cfg, cfg["seed"], inputs=formats.dataset_files(args.data),
                           outputs=[out], extra={"final_loss": hist[-1] if hist else None})
    print(f"vae saved to {out}; final loss {hist[-1] if hist else float('nan'):.5f}")


def cmd_train_adm(args, cfg):
    ds = formats.load_dataset(args.data)
    vae = formats.load_vae(args.vae)
    model, _, hist = train_adm(ds, vae, DenoiserConfig(**cfg["denoiser"]), ADMTrainConfig(**cfg["adm_train"]), seed=cfg["seed"])
    out = Path(args.out)
    formats.save_model(model, out, "denoiser")
    formats.write_manifest(_manifest_path(out), "train-adm", cfg, cfg["seed"],
                           inputs=[args.vae, *formats.dataset_files(args.data)], outputs=[out],
                           extra={"initial_loss": hist[0] if hist else None, "final_loss": hist[-1] if hist else None})
    print(f"denoiser saved to {out}")


def cmd_finetune_adapter(args, cfg):
    ds = formats.load_dataset(args.data)
    vae = formats.load_vae(args.vae)
    base, sched = formats.load_denoiser(args.base)
    base_digest = formats.state_digest(base)
    tcfg = AdapterTrainConfig(**cfg["adapter_train"])
    adapter, tuned, hist = finetune_adapter(base, vae, ds, args.mode, sched, tcfg, seed=cfg["seed"])
    part = partition_parameters(tuned, args.mode, adapter)
    after = named_tensors(tuned, adapter)
    reference = named_tensors(formats.load_denoiser(args.base)[0], copy.deepcopy(adapter))
    frozen_base = sorted(n for n in part.frozen if n.startswith("denoiser."))
    frozen = {n: tensor_digest(after[n]) for n in frozen_base}
    ref = {n: tensor_digest(reference[n]) for n in frozen_base}
    out = Path(args.out)
    formats.save_adapter(adapter, out, base_digest, tuned_base=tuned if args.mode == "b" else None)
    formats.write_manifest(
        _manifest_path(out), "finetune-adapter", cfg, cfg["seed"],
        inputs=[args.base, args.vae, *formats.dataset_files(args.data)], outputs=[out],
        extra={"mode": args.mode, "base_digest": base_digest, "frozen_digests": frozen,
               "base_checkpoint_digests": ref, "frozen_match": frozen == ref,
               "trainable": sorted(part.trainable), "final_loss": hist[-1] if hist else None},
    )
    print(f"adapter (mode {args.mode}) saved to {out}; frozen tensors unchanged: {frozen == ref}")


def cmd_train_controlnet(args, cfg):
    ds = formats.load_dataset(args.data)
    vae = formats.load_vae(args.vae)
    base, sched = formats.load_denoiser(args.base)
    cnet, hist = train_controlnet(base, vae, ds, sched, ControlTrainConfig(**cfg["control_train"]), seed=cfg["seed"])
    out = Path(args.out)
    formats.save_model(cnet, out, "controlnet", extra={"base_digest": formats.state_digest(base), "joints": 1})
    formats.write_manifest(_manifest_path(out), "train-controlnet", cfg, cfg["seed"],
                           inputs=[args.base, args.vae, *formats.dataset_files(args.data)], outputs=[out],
                           extra={"final_loss": hist[-1] if hist else None})
    print(f"controlnet saved to {out}")


def cmd_sample(args, cfg):
    if args.style_prompt and not args.adapter:
        raise UsageError("--style-prompt needs --adapter")
    if args.traj and not args.controlnet:
        raise UsageError("--traj needs --controlnet")
    if args.controlnet and not args.traj:
        raise UsageError("--controlnet needs --traj")
    vae = formats.load_vae(args.vae)
    model, sched = formats.load_denoiser(args.base)
    inputs = [args.vae, args.base]
    adapter = style = cnet = traj = None
    if args.adapter:
        adapter, model = formats.load_adapter(args.adapter, model)
        inputs.append(args.adapter)
    if args.style_prompt:
        style = style_from_motion(formats.read_motion(args.style_prompt), vae).prompt_latent
        inputs.append(args.style_prompt)
    if args.controlnet:
        cnet = formats.load_controlnet(args.controlnet, model)
        traj = formats.read_trajectory(args.traj)
        inputs += [args.controlnet, args.traj]
    texts = [t for t in args.text for _ in range(args.repeat)]
    length = args.length if args.length is not None else (traj.length if traj is not None else 40)
    if traj is not None and traj.length != length:
        raise DataError(f"trajectory has {traj.length} frames but --length is {length}")
    seed = args.seed if args.seed is not None else cfg["seed"]
    motions = sample(texts, length, _guidance(cfg, args), model, vae, sched, seed=seed, adapter=adapter,
                     style=style, controlnet=cnet, trajectory=traj)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    lines = []
    for i, (t, m) in enumerate(zip(texts, motions)):
        f = out / f"sample_{i:03d}.txt"
        formats.write_motion(f, m)
        files.append(f)
        lines.append(json.dumps({"file": f.name, "caption": t, "seed": seed + i}, sort_keys=True))
    formats.atomic_write(out / "samples.jsonl", ("\n".join(lines) + "\n").encode())
    formats.write_manifest(out / "manifest.json", "sample", {**cfg, "texts": texts, "length": length}, seed,
                           inputs=inputs, outputs=files)
    print(f"wrote {len(files)} motions to {out}")


def _read_motion_dir(root: str) -> tuple[list[np.ndarray], list[str] | None]:
    root = Path(root)
    if (root / formats.DATASET_INDEX).is_file():
        ds = formats.load_dataset(root)
        return ds.motions(), ds.captions()
    if (root / "samples.jsonl").is_file():
        recs = [json.loads(x) for x in (root / "samples.jsonl").read_text().splitlines() if x.strip()]
        return [formats.read_motion(root / r["file"]) for r in recs], [r["caption"] for r in recs]
    files = sorted(p for p in root.glob("*.txt"))
    if not files:
        raise DataError(f"no motion files in {root}")
    return [formats.read_motion(p) for p in files], None


def cmd_eval(args, cfg):
    real, _ = _read_motion_dir(args.real)
    gen, captions = _read_motion_dir(args.gen)
    seed = cfg["seed"] if args.seed is None else args.seed
    rf, gf = feature_set(real, seed), feature_set(gen, seed)
    report = MetricReport(fid=fid(rf, gf))
    if len(gf) >= 2:
        report.diversity = diversity(gf, pairs=min(args.div_pairs, len(gf) // 2), seed=seed)
    if captions is not None and len(captions) >= args.batch:
        tf = feature_set([text_encode_stub(c) for c in captions], seed)
        report.update_retrieval(retrieval_metrics(tf, gf, batch=args.batch, seed=seed))
    out = Path(args.out)
    formats.atomic_write(out, (report.to_json() + "\n").encode())
    if args.csv:
        formats.atomic_write(Path(args.csv), ("\n".join([",".join(MetricReport.csv_header())]) + "\n" + report.to_csv_row()).encode())
    formats.write_manifest(_manifest_path(out), "eval", cfg, seed, outputs=[out])
    print(report.to_json())


def _read_bank(path: str | None) -> WordBank | None:
    if not path:
        return None
    entries = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            word, score = line.split("\t")
            entries.append((word, float(score)))
    return WordBank(entries)


def cmd_wordbank(args, cfg):
    corpus_path = Path(args.corpus)
    if corpus_path.is_dir():
        docs = formats.load_dataset(corpus_path).captions()
    else:
        docs = [ln for ln in corpus_path.read_text().splitlines() if ln.strip()]
    bank = build_word_bank(docs, max_features=args.max_features, top_n=args.top_n)
    out = Path(args.out)
    body = "".join(f"{w}\t{s:.17g}\n" for w, s in bank.entries)
    formats.atomic_write(out, body.encode())
    formats.write_manifest(_manifest_path(out), "wordbank", cfg, cfg["seed"], outputs=[out],
                           extra={"entries": len(bank), "truncated": bank.truncated})
    if not bank.truncated:
        log.warning("only %d terms survived (< top_n=%d)", len(bank), args.top_n)
    print(f"wrote {len(bank)} words to {out}")


def _client(args):
    if args.fixture:
        return FixturePlayer.load(args.fixture, sequential=args.sequential)
    return HTTPClient(endpoint=args.endpoint, model=args.model)


def cmd_plan(args, cfg):
    instructions = list(args.instruction or [])
    if args.input:
        instructions += [ln.strip() for ln in Path(args.input).read_text().splitlines() if ln.strip()]
    if not instructions:
        raise UsageError("no instructions given")
    exchanges = plan_many(instructions, _client(args), _read_bank(args.bank), PlannerConfig(**cfg["planner"]))
    lines = [json.dumps({"instruction": e.instruction, "output": e.outputs[0], "latency_s": e.latencies[0]}) for e in exchanges]
    art = average_response_time([e.latencies[0] for e in exchanges])
    text = "\n".join(lines) + "\n"
    if args.out:
        formats.atomic_write(Path(args.out), text.encode())
    sys.stdout.write(text)
    print(json.dumps({"art_s": art}))


def cmd_judge(args, cfg):
    client = _client(args)
    bank = _read_bank(args.bank)
    lines = [ln for ln in Path(args.input).read_text().splitlines() if ln.strip()]
    if args.kind == "rule":
        rcs, malformed = judge_rcs(lines, client, bank)
        result = {"rcs": rcs, "n": len(lines), "malformed": malformed}
    else:
        if not args.label:
            raise UsageError("--label is required for ranking")
        items = [(r["instruction"], r["candidates"]) for r in map(json.loads, lines)]
        ps, skipped = judge_ps(items, args.label, client, bank)
        result = {"ps": ps, "label": args.label, "n": len(items), "skipped": skipped}
    text = json.dumps(result, sort_keys=True)
    if args.out:
        formats.atomic_write(Path(args.out), (text + "\n").encode())
    print(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acmo", description="Desk-scale text-to-motion latent diffusion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. vae_train.steps=500")
        sp.set_defaults(func=fn)
        return sp

    sp = command("synth", cmd_synth, "generate a synthetic motion dataset")
    sp.add_argument("--out", required=True)

    sp = command("train-vae", cmd_train_vae, "train the motion VAE")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = command("train-adm", cmd_train_adm, "train the latent denoiser")
    sp.add_argument("--data", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--out", required=True)

    sp = command("finetune-adapter", cmd_finetune_adapter, "finetune a motion adapter on styled data")
    sp.add_argument("--mode", choices=("a", "b", "c"), default="c")
    sp.add_argument("--data", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--out", required=True)

    sp = command("train-controlnet", cmd_train_controlnet, "train the trajectory ControlNet")
    sp.add_argument("--data", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--out", required=True)

    sp = command("sample", cmd_sample, "generate motions from text")
    sp.add_argument("--text", action="append", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--adapter")
    sp.add_argument("--style-prompt", help="motion file used as the style prompt")
    sp.add_argument("--controlnet")
    sp.add_argument("--traj", help="trajectory file")
    sp.add_argument("--gs", type=float, help="guidance scale")
    sp.add_argument("--steps", type=int, help="inference steps")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--length", type=int)
    sp.add_argument("--repeat", type=int, default=1, help="samples per text")
    sp.add_argument("--out", required=True)

    sp = command("eval", cmd_eval, "compute metrics between real and generated motions")
    sp.add_argument("--real", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--div-pairs", type=int, default=300)

    sp = command("wordbank", cmd_wordbank, "build the frequent word bank")
    sp.add_argument("--corpus", required=True, help="text file (one document per line) or dataset directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--top-n", type=int, default=512)
    sp.add_argument("--max-features", type=int, default=1024)

    for name, fn, help in (("plan", cmd_plan, "rewrite instructions with the planner"), ("judge", cmd_judge, "score planner outputs")):
        sp = command(name, fn, help)
        sp.add_argument("--bank", help="word bank file from the wordbank command")
        sp.add_argument("--fixture", help="JSONL transcript replayed instead of a live service")
        sp.add_argument("--sequential", action="store_true", help="serve fixture records in order")
        sp.add_argument("--endpoint")
        sp.add_argument("--model", default="default")
        sp.add_argument("--out")
        if name == "plan":
            sp.add_argument("--instruction", action="append")
            sp.add_argument("--input")
        else:
            sp.add_argument("--kind", choices=("rule", "rank"), required=True)
            sp.add_argument("--input", required=True)
            sp.add_argument("--label")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        cfg = load_config(args.config, args.set)
        torch.manual_seed(cfg["seed"])
        args.func(args, cfg)
    except AcmoError as e:
        print(f"acmo: error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"acmo: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
