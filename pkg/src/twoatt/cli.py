"""Command line entry point: ``twoatt {train,eval,classify,ablate,gradcheck,synth}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .data import Dataset, ManifestError, corrupt_labels, export_dataset, load_manifest, synth_dataset

log = logging.getLogger("twoatt")

# explicit ablation points; a plain grid would cross every axis
PRESETS = {
    "loss": [{"loss": "mse"}, {"loss": "tukey"}],
    "heads": [{"head_mode": "2mt"}, {"head_mode": "mt"}, {"head_mode": "single"}],
    "blocks": [{"blocks": 1}, {"blocks": 2}, {"blocks": 3}],
    "attention": [{"attention_mode": "none"}, {"attention_mode": "level1"}, {"attention_mode": "level2"}],
    "hidden": [{"hidden": "128x128"}, {"hidden": "256x128"}, {"hidden": "256x256"}],
    "robust-multitask": [
        {"loss": "tukey", "head_mode": "2mt"},
        {"loss": "mse", "head_mode": "2mt"},
        {"loss": "tukey", "head_mode": "mt"},
        {"loss": "tukey", "head_mode": "single"},
    ],
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value file")
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for f in dataclasses.fields(TrainConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.name.upper(),
                       help=f"default {getattr(TrainConfig(), f.name)!r}".replace("'", ""))


def _add_data_flags(p: argparse.ArgumentParser, val: bool = True) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="manifest CSV (image_path,valence,arousal,expression)")
    src.add_argument("--synth", type=int, metavar="N", help="generate N synthetic faces instead")
    p.add_argument("--synth-seed", type=int, default=0)
    if val:
        p.add_argument("--val", type=Path, help="validation manifest (default: split off --val-fraction)")
        p.add_argument("--val-fraction", type=float, default=0.2)
        p.add_argument("--corrupt", type=float, default=0.0,
                       help="fraction of training rows whose regression labels are replaced by noise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twoatt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, write metrics, curves and checkpoints")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("eval", help="CCC/RMSE of a checkpoint with flip-averaged prediction")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(p, val=False)
    p.add_argument("--out", type=Path, help="write metrics.csv here")

    p = sub.add_parser("classify", help="seven-way expression accuracy of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(p, val=False)

    p = sub.add_parser("ablate", help="train a set of configurations over seeds, write ablation.csv")
    _add_config_flags(p)
    _add_data_flags(p)
    axes = p.add_mutually_exclusive_group()
    axes.add_argument("--grid", help='cartesian grid, e.g. "loss=mse,tukey;blocks=1,2,3"')
    axes.add_argument("--preset", choices=sorted(PRESETS), default="robust-multitask")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    _add_config_flags(p)
    p.add_argument("--ops-only", action="store_true", help="skip the full-network case")

    p = sub.add_parser("synth", help="write a synthetic face dataset as PNGs plus manifest.csv")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", type=float, default=0.0)
    p.add_argument("--out", type=Path, required=True)
    return parser


def load_config(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config is not None:
        return TrainConfig.load(args.config, overrides)
    return TrainConfig.from_dict(overrides)


def load_data(args) -> Dataset:
    if args.synth is not None:
        return synth_dataset(args.synth, seed=args.synth_seed)
    return Dataset.from_manifest(load_manifest(args.data))


def train_val(args, seed: int) -> tuple[Dataset, Dataset]:
    from .train import split_dataset

    data = load_data(args)
    if args.val is not None:
        train, val = data, Dataset.from_manifest(load_manifest(args.val))
    else:
        train, val = split_dataset(data, args.val_fraction, seed)
    if args.corrupt:
        train = corrupt_labels(train, args.corrupt, seed=seed)
    return train, val


def cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args)
    tr, va = train_val(args, cfg.seed)
    log.info("training on %d samples, validating on %d", len(tr), len(va))
    res = train(cfg, tr, va, args.out, plots=not args.no_plots, progress=True)
    print(f"best epoch {res.best_epoch}: val mean CCC {res.best_ccc:.4f}; outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate, metric_columns, targets_of, write_csv

    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate(ckpt, load_data(args))
    for key, value in report.items():
        if not key.endswith("degenerate"):
            print(f"{key:14s} {value:.6f}")
    for t in targets_of(ckpt.config):
        if report[f"ccc_{t}_degenerate"]:
            print(f"warning: CCC for {t} is degenerate (constant predictions or targets)", file=sys.stderr)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_csv(args.out / "metrics.csv", metric_columns(targets_of(ckpt.config)),
                  [{"split": "test", "epoch": ckpt.epoch, **report}])
    return 0


def cmd_classify(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import classify_eval

    acc = classify_eval(load_checkpoint(args.checkpoint), load_data(args))
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .train import ablate, expand_grid, parse_grid

    cfg = load_config(args)
    points = expand_grid(parse_grid(args.grid)) if args.grid else PRESETS[args.preset]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    tr, va = train_val(args, cfg.seed)
    rows = ablate(points, cfg, tr, va, seeds, args.out, plots=not args.no_plots)
    for row in rows:
        print(f"{row['config']:40s} {row['status']:7s} ccc_mean={row.get('ccc_mean', float('nan')):.4f}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_results, run_suite

    cfg = load_config(args)
    results = run_suite(cfg.seed, cfg, full=not args.ops_only)
    print("\n".join(format_results(results)))
    return 0 if all(r.passed for r in results) else 1


def cmd_synth(args) -> int:
    data = synth_dataset(args.n, seed=args.seed, corrupt=args.corrupt)
    path = export_dataset(data, args.out)
    counts = np.bincount(data.expression, minlength=7)
    print(f"wrote {args.n} images and {path}; class counts {counts.tolist()}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "classify": cmd_classify, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate")
                        else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ManifestError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
