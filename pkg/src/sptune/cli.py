"""``sptune`` command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 failed check.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy

from . import __version__
from .ablation import SWEEPS, consolidated_markdown, run_sweep
from .backbone import Backbone, BackboneConfig
from .data import DataConfig, generate_pairs, load_dataset, read_manifest, read_ppm, remask, write_dataset
from .evaluation import evaluate
from .gradcheck import TOLERANCE, run_gradcheck
from .masks import GRANULARITY, masks_from_labels, oracle_segment, save_masks
from .spt import VARIANTS, SptConfig, TunedModel
from .tensor import NonFiniteError
from .train import TrainConfig, TrainingDiverged, load_checkpoint, pretrain, save_checkpoint, spt_tune, write_log

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("sptune")


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_metadata(out: Path, command: str, cfg: dict, seed: int | None, started: float, **extra) -> None:
    meta = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "wall_time_s": round(time.time() - started, 3),
        "versions": {"sptune": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    meta.update(extra)
    write_json(out / "run-metadata.json", meta)


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    return h, w


def parse_positions(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"positions must be comma-separated integers, got {text!r}") from None


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def train_config(args, section: dict) -> TrainConfig:
    cfg = _override(section, lr0=args.lr, iters=args.iters, halve_every=args.halve_every, batch=args.batch,
                    patch=args.patch, loss=args.loss, seed=args.seed,
                    augment=False if args.no_augment else None)
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def _need_dir(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} {p} is not a directory")
    return p


def resolve_checkpoint(path: str, names: Sequence[str] = ("tuned.ckpt", "backbone.ckpt")) -> Path:
    p = Path(path)
    if p.is_dir():
        for n in names:
            if (p / n).exists():
                return p / n
        raise ConfigError(f"no checkpoint ({', '.join(names)}) in {p}")
    if not p.exists():
        raise ConfigError(f"checkpoint {p} not found")
    return p


# commands -------------------------------------------------------------------

def cmd_make_data(args) -> int:
    started = time.time()
    task = args.task
    if task == "sr" and (args.sigma is not None or args.r is None):
        raise ConfigError("sr takes --r and no --sigma")
    if task == "denoise" and (args.r is not None or args.sigma is None):
        raise ConfigError("denoise takes --sigma and no --r")
    try:
        cfg = DataConfig(task=task, r=args.r if task == "sr" else 1, sigma=args.sigma if task == "denoise" else 0,
                         n=args.n, size=args.size, seed=args.seed, grid=args.grid,
                         nc=args.nc or GRANULARITY[args.grid], k_shapes=args.k_shapes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = write_dataset(args.out, cfg, generate_pairs(cfg))
    write_run_metadata(out, "make-data", {**cfg.__dict__, "size": list(cfg.size)}, cfg.seed, started)
    print(f"wrote {cfg.n} {task} pairs to {out}")
    return EXIT_OK


def cmd_make_masks(args) -> int:
    started = time.time()
    nc = args.nc or GRANULARITY[args.grid]
    if nc < 1:
        raise ConfigError("--nc must be >= 1")
    if bool(args.data) == bool(args.images):
        raise ConfigError("give exactly one of --data or --images")
    out = Path(args.out)
    if args.data:
        src = _need_dir(args.data, "--data")
        manifest = read_manifest(src)
        pairs = remask(load_dataset(src), args.grid, nc)
        cfg = DataConfig(**{**manifest["config"], "size": tuple(manifest["config"]["size"]), "grid": args.grid,
                            "nc": nc})
        write_dataset(out, cfg, pairs)
        count = len(pairs)
    else:
        paths = [Path(p) for p in args.images]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ConfigError(f"missing images: {', '.join(missing)}")
        out.mkdir(parents=True, exist_ok=True)
        for p in paths:
            save_masks(masks_from_labels(oracle_segment(read_ppm(p)), args.grid, nc), out / f"{p.stem}.masks.sptm")
        count = len(paths)
    write_run_metadata(out, "make-masks", {"grid": args.grid, "nc": nc}, None, started)
    print(f"wrote masks (grid {args.grid}, N_c {nc}) for {count} images to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    started = time.time()
    run = load_config(args.config)
    data_dir = _need_dir(args.data or run.get("data"), "--data")
    manifest = read_manifest(data_dir)
    dcfg = manifest["config"]
    for key in ("task", "r", "sigma"):
        if key in run and run[key] != dcfg[key] and not (key == "r" and dcfg["task"] == "denoise"):
            raise ConfigError(f"run config {key}={run[key]!r} does not match dataset {key}={dcfg[key]!r}")
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    bsec = _override(run.get("backbone", {}), C=args.C, N1=args.N1)
    try:
        bcfg = BackboneConfig.from_dict({**bsec, "task": dcfg["task"], "r": dcfg["r"] if dcfg["task"] == "sr" else 1})
        tcfg = train_config(args, {**run.get("train", {}), "seed": seed})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    pairs = load_dataset(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    effective = {"task": bcfg.task, "r": bcfg.r, "sigma": dcfg["sigma"], "backbone": bcfg.to_dict(),
                 "train": tcfg.to_dict(), "data": str(data_dir), "seed": seed}
    write_json(out / "run-config.json", effective)
    bb = Backbone.init(bcfg, seed)
    res = pretrain(bb, pairs, tcfg)
    ckpt = out / "backbone.ckpt"
    save_checkpoint(ckpt, bb.params, bcfg, extra={"data_manifest": config_hash(manifest)})
    write_log(out / "train_log.csv", res.log)
    write_run_metadata(out, "pretrain", effective, seed, started, checkpoint_sha256=sha256_file(ckpt),
                       iterations=res.stopped_at, backbone_params=bb.params.count())
    final = f"; final loss {res.log[-1][2]:.6f}" if res.log else ""
    print(f"pretrained {bb.params.count()} parameters for {res.stopped_at} iterations{final}")
    return EXIT_OK


def _recorded_hash(ckpt: Path) -> str | None:
    meta = ckpt.parent / "run-metadata.json"
    if not meta.exists():
        return None
    return json.loads(meta.read_text()).get("checkpoint_sha256")


def spt_config(args, section: dict) -> SptConfig:
    grid = args.grid if args.grid is not None else section.get("grid", 8)
    sec = _override(section, variant=args.variant, alpha=args.alpha, positions=args.positions, grid=grid,
                    nc=args.nc)
    if "nc" not in sec:
        sec["nc"] = GRANULARITY.get(grid, 64)
    try:
        return SptConfig.from_dict(sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad SPT config: {exc}") from exc


def cmd_tune(args) -> int:
    started = time.time()
    run = load_config(args.config)
    ckpt = resolve_checkpoint(args.backbone or run.get("backbone_checkpoint") or "", ("backbone.ckpt",))
    actual = sha256_file(ckpt)
    recorded = _recorded_hash(ckpt)
    if recorded != actual and not args.force:
        why = "no recorded hash" if recorded is None else f"recorded {recorded[:12]}, found {actual[:12]}"
        raise ConfigError(f"backbone checkpoint {ckpt} does not match its pretrain record ({why}); use --force")
    data_dir = _need_dir(args.data or run.get("data"), "--data")
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    scfg = spt_config(args, run.get("spt", {}))
    tcfg = train_config(args, {**run.get("train", {}), "seed": seed})
    bb = load_checkpoint(ckpt)
    if isinstance(bb, TunedModel):
        raise ConfigError(f"{ckpt} already contains SPT units")
    try:
        scfg.resolved_positions(bb.cfg.N1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    pairs = load_dataset(data_dir, require_masks=True)
    if pairs[0].masks.nc != scfg.nc:
        raise ConfigError(f"dataset masks have {pairs[0].masks.nc} channels, SPT config expects {scfg.nc}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = {"backbone": bb.cfg.to_dict(), "spt": scfg.to_dict(), "train": tcfg.to_dict(),
                 "data": str(data_dir), "seed": seed, "backbone_sha256": actual}
    write_json(out / "run-config.json", effective)
    model, res = spt_tune(bb, scfg, pairs, tcfg)
    tuned = out / "tuned.ckpt"
    save_checkpoint(tuned, model.params, bb.cfg, scfg, extra={"backbone_sha256": actual})
    write_log(out / "train_log.csv", res.log)
    write_run_metadata(out, "tune", effective, seed, started, checkpoint_sha256=sha256_file(tuned),
                       iterations=res.stopped_at, spt_params=model.spt_param_count(),
                       backbone_params=bb.params.count(), forced=bool(args.force and recorded != actual))
    print(f"tuned {model.spt_param_count()} SPT parameters (backbone {bb.params.count()} frozen) "
          f"for {res.stopped_at} iterations")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    data_dir = _need_dir(args.data, "--data")
    model = load_checkpoint(resolve_checkpoint(args.model))
    baseline = load_checkpoint(resolve_checkpoint(args.baseline, ("backbone.ckpt", "tuned.ckpt"))) \
        if args.baseline else None
    pairs = load_dataset(data_dir, require_masks=isinstance(model, TunedModel))
    report = evaluate(model, pairs, baseline, method=args.method, baseline_method=args.baseline_method,
                      dataset=args.dataset_name, with_reference_rows=not args.no_reference_rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    meta_lines = "".join(f"- {k}: {v}\n" for k, v in sorted(report.metadata.items()))
    (out / "report.md").write_text(report.to_markdown() + "\n" + meta_lines)
    delta = report.measured()[-1]["delta_db"]
    write_run_metadata(out, "eval", {"model": str(args.model), "baseline": str(args.baseline),
                                     "data": str(data_dir)}, None, started, **report.metadata)
    print(report.to_markdown(), end="")
    if args.require_delta is not None:
        if delta is None:
            raise ConfigError("--require-delta needs --baseline")
        if delta < args.require_delta:
            raise CheckFailed(f"delta {delta:+.4f} dB below required {args.require_delta:+.4f} dB")
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.time()
    base = load_config(args.base)
    sweeps = list(SWEEPS) if not args.sweep or "all" in args.sweep else args.sweep
    bad = [s for s in sweeps if s not in SWEEPS]
    if bad:
        raise ConfigError(f"unknown sweep(s) {bad}; choose from {', '.join(SWEEPS)} or all")
    ckpt = resolve_checkpoint(args.backbone or base.get("backbone_checkpoint") or "", ("backbone.ckpt",))
    train_dir = _need_dir(args.data or base.get("data"), "--data")
    eval_dir = _need_dir(args.eval_data or base.get("eval_data"), "--eval-data")
    seed = args.seed if args.seed is not None else base.get("seed", 0)
    scfg = spt_config(args, base.get("spt", {}))
    tcfg = train_config(args, {**base.get("train", {}), "seed": seed})
    bb = load_checkpoint(ckpt)
    if isinstance(bb, TunedModel):
        raise ConfigError(f"{ckpt} already contains SPT units")
    train_pairs = load_dataset(train_dir, require_masks=True)
    eval_pairs = load_dataset(eval_dir, require_masks=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = {"spt": scfg.to_dict(), "train": tcfg.to_dict(), "data": str(train_dir),
                 "eval_data": str(eval_dir), "backbone_sha256": sha256_file(ckpt), "sweeps": sweeps, "seed": seed}
    write_json(out / "run-config.json", effective)
    tables = []
    for sweep in sweeps:
        table = run_sweep(sweep, bb, train_pairs, eval_pairs, scfg, tcfg, progress=log.info)
        tables.append(table)
        (out / f"ablation_{sweep}.csv").write_text(table.to_csv())
    md = consolidated_markdown(tables)
    (out / "ablation.md").write_text(md)
    print(md, end="")
    failed = []
    for t in tables:
        if t.sweep == "positions" and len(t.rows) > 1 and t.rows[-1].psnr < t.rows[0].psnr:
            failed.append(f"positions: {t.rows[-1].label} {t.rows[-1].psnr:.4f} < B1 {t.rows[0].psnr:.4f}")
    write_run_metadata(out, "ablate", effective, seed, started, failed_checks=failed)
    if failed and args.check:
        raise CheckFailed("; ".join(failed))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.time()
    print(f"{'component':44s} {'max rel err':>12s} {'values':>7s}  status")

    def show(r):
        print(f"{r.component:44s} {r.max_rel_err:12.3e} {r.n_values:7d}  {'ok' if r.ok else 'FAIL'}", flush=True)

    results = run_gradcheck(args.seed, show, only=args.only)
    if not results:
        raise ConfigError(f"no component matches {args.only!r}")
    elapsed = time.time() - started
    print(f"{len(results)} components in {elapsed:.1f}s (tolerance {TOLERANCE:g})")
    failed = [r.component for r in results if not r.ok]
    if failed:
        raise CheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


# parser ---------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--iters", type=int)
    g.add_argument("--lr", type=float, help="initial learning rate")
    g.add_argument("--halve-every", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--patch", type=int, help="LQ patch size")
    g.add_argument("--loss", choices=("l1", "l2"))
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--seed", type=int)


def _spt_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("SPT units")
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--alpha", type=float)
    g.add_argument("--positions", type=parse_positions, help="comma-separated block indices, e.g. 1,2,3")
    g.add_argument("--grid", type=int, choices=sorted(GRANULARITY))
    g.add_argument("--nc", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sptune", description="Prior-tuning adapters for small restoration networks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate a synthetic degraded dataset")
    p.add_argument("--task", choices=("sr", "denoise"), required=True)
    p.add_argument("--r", type=int, choices=(2, 3, 4))
    p.add_argument("--sigma", type=int, choices=(15, 25, 50))
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=parse_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, choices=sorted(GRANULARITY), default=8)
    p.add_argument("--nc", type=int)
    p.add_argument("--k-shapes", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("make-masks", help="oracle-segment images or a dataset into mask stacks")
    p.add_argument("--grid", type=int, choices=sorted(GRANULARITY), default=8)
    p.add_argument("--nc", type=int)
    p.add_argument("--data", help="dataset directory to re-mask (written as a new dataset under --out)")
    p.add_argument("--images", nargs="+", help="8-bit PPM images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_masks)

    p = sub.add_parser("pretrain", help="train a backbone from scratch")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--C", type=int)
    p.add_argument("--N1", type=int)
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", help="freeze a pretrained backbone and train SPT units")
    p.add_argument("--config")
    p.add_argument("--backbone", help="pretrain output directory or checkpoint")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="tune even if the backbone hash does not match")
    _spt_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="PSNR/SSIM of a model, optionally against a baseline")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="SPT")
    p.add_argument("--baseline-method", default="baseline")
    p.add_argument("--dataset-name", default="synthetic")
    p.add_argument("--no-reference-rows", action="store_true")
    p.add_argument("--require-delta", type=float, help="exit 4 if tuned - baseline is below this (dB)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variant / position / alpha / granularity sweeps")
    p.add_argument("--sweep", action="append", help=f"one of {', '.join(SWEEPS)}, or all (repeatable)")
    p.add_argument("--base", help="run-config JSON with data, eval_data and backbone_checkpoint")
    p.add_argument("--backbone")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true", help="exit 4 if tuning every block loses to tuning B1 only")
    _spt_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference check of every component")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", help="run only components whose name contains this text")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"sptune: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"sptune: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailed as exc:
        print(f"sptune: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"sptune: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
