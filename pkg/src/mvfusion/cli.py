"""Command-line interface: synth, train, compare, report.

Exit codes are a stable scripting contract: 0 success, 1 usage error,
2 data/configuration error, 3 runtime failure.  Every invocation writes a
``config.json`` with the fully resolved flags and seeds next to its
outputs, and output files are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import CANONICAL_TIMESTEPS, load_dataset, write_dataset
from .errors import (
    ConfigurationError,
    DataCorruptionError,
    MetricError,
    MvfusionError,
    NumericError,
    PartitionError,
    RangeError,
    SchemaError,
)
from .experiment import (
    run_comparison,
    run_experiment,
    write_atomic,
    write_results,
    read_results,
)
from .fusion import DEFAULT_GATE, DEFAULT_MERGE, GATES, MERGES, ModelConfig
from .report import build_report
from .synth import SynthConfig, SynthViewConfig, synth_generate
from .training import TrainConfig

# Shape-faithful default view set: optical 11ch, radar 2ch, weather 2ch,
# NDVI 1ch, DEM 2ch static, with a near-random DEM and a dominant optical.
DEFAULT_VIEWS = "optical:11:0.8,radar:2:0.5,weather:2:0.2,ndvi:1:0.4,dem:2:0.0:static"

PUBLIC_METHODS = ("input", "feature-s", "feature-g", "decision", "multiloss", "ensemble")

_USAGE_EXIT, _DATA_EXIT, _RUNTIME_EXIT = 1, 2, 3
_DATA_ERRORS = (
    SchemaError,
    DataCorruptionError,
    RangeError,
    ConfigurationError,
    PartitionError,
    MetricError,
    FileNotFoundError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_view_flag(text):
    """Parse the `name:channels:informativeness[:static]` grammar."""
    views = []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        if len(parts) not in (3, 4):
            raise UsageError(f"bad view spec {chunk!r}; expected name:channels:informativeness[:static]")
        name, channels, informativeness = parts[0], parts[1], parts[2]
        static = False
        if len(parts) == 4:
            if parts[3] != "static":
                raise UsageError(f"bad view modifier {parts[3]!r}; only 'static' is allowed")
            static = True
        try:
            views.append(
                SynthViewConfig(
                    name=name,
                    channels=int(channels),
                    informativeness=float(informativeness),
                    static=static,
                )
            )
        except ValueError as exc:
            raise UsageError(f"bad view spec {chunk!r}: {exc}") from exc
    return tuple(views)


def _add_train_flags(parser):
    parser.add_argument("--data", required=True, help="path to a dataset manifest.json")
    parser.add_argument("--runs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--batch-size", type=int, default=256)
    parser.add_argument("--max-epochs", type=int, default=1000)
    parser.add_argument("--patience", type=int, default=5)
    parser.add_argument("--min-delta", type=float, default=0.01)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--aux-weight", type=float, default=0.3)
    parser.add_argument("--threshold", type=float, default=0.5)
    parser.add_argument("--val-fraction", type=float, default=0.1)
    parser.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = _Parser(prog="mvfusion", description="Multi-view fusion experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--samples", type=int, default=2000)
    p_synth.add_argument("--views", default=DEFAULT_VIEWS,
                         help="comma-separated name:channels:informativeness[:static]")
    p_synth.add_argument("--timesteps", type=int, default=CANONICAL_TIMESTEPS)
    p_synth.add_argument("--positive-fraction", type=float, default=0.5)
    p_synth.add_argument("--noise-scale", type=float, default=1.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="train one fusion method")
    p_train.add_argument("--method", required=True, choices=PUBLIC_METHODS)
    p_train.add_argument("--merge", choices=MERGES, default=None)
    p_train.add_argument("--gate", choices=GATES, default=None)
    _add_train_flags(p_train)

    p_compare = sub.add_parser("compare", help="run all six methods plus per-view baselines")
    p_compare.add_argument("--merge", choices=MERGES, default=DEFAULT_MERGE)
    p_compare.add_argument("--gate", choices=GATES, default=DEFAULT_GATE)
    _add_train_flags(p_compare)

    p_report = sub.add_parser("report", help="aggregate a results file")
    p_report.add_argument("--results", required=True, help="path to results.jsonl")
    p_report.add_argument("--out", required=True)
    return parser


def _write_config(out_dir, args):
    resolved = {k: v for k, v in vars(args).items()}
    write_atomic(Path(out_dir) / "config.json", json.dumps(resolved, indent=2, default=str))


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        min_delta=args.min_delta,
        learning_rate=args.lr,
        runs=args.runs,
        base_seed=args.seed,
        val_fraction=args.val_fraction,
        threshold=args.threshold,
    )


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_samples=args.samples,
        views=tuple(
            SynthViewConfig(
                name=v.name,
                channels=v.channels,
                informativeness=v.informativeness,
                static=v.static,
                noise_scale=args.noise_scale,
            )
            for v in parse_view_flag(args.views)
        ),
        timesteps=args.timesteps,
        positive_fraction=args.positive_fraction,
        seed=args.seed,
    )
    dataset = synth_generate(cfg)
    manifest = write_dataset(dataset, args.out)
    _write_config(args.out, args)
    rate = float(dataset.labels.mean())
    print(f"wrote {manifest}")
    print(
        f"samples={dataset.num_samples} views={','.join(dataset.view_names)} "
        f"timesteps={dataset.timesteps} positive_rate={rate:.3f}"
    )
    for split in ("train", "val", "test"):
        print(f"split {split}: {dataset.splits[split].size}")
    return 0


def _validate_method_flags(args):
    if args.merge is not None and args.method != "feature-s":
        raise UsageError("--merge applies to --method feature-s only")
    if args.gate is not None and args.method != "feature-g":
        raise UsageError("--gate applies to --method feature-g only")
    merge = args.merge if args.method == "feature-s" else None
    gate = args.gate if args.method == "feature-g" else None
    if args.method == "feature-s" and merge is None:
        merge = DEFAULT_MERGE
    if args.method == "feature-g" and gate is None:
        gate = DEFAULT_GATE
    return merge, gate


def _save_run_models(models, out_dir):
    for run, entry in enumerate(models):
        if entry is None:
            continue
        base = Path(out_dir) / "checkpoints" / f"run-{run:03d}"
        if isinstance(entry, list):
            for model in entry:
                model.save(base / f"view-{model.view_specs[0].name}")
        else:
            entry.save(base)


def cmd_train(args) -> int:
    merge, gate = _validate_method_flags(args)
    dataset = load_dataset(args.data)
    train_cfg = _train_config(args)
    model_cfg = ModelConfig(
        method=args.method, merge=merge, gate=gate, aux_weight=args.aux_weight, seed=args.seed
    )
    results, models = run_experiment(
        model_cfg, train_cfg, dataset, keep_models=True
    )
    out = Path(args.out)
    write_results(out / "results.jsonl", results)
    _save_run_models(models, out)
    _write_config(out, args)
    ok = sum(1 for r in results if not r.failed)
    print(f"wrote {out / 'results.jsonl'} ({ok}/{len(results)} runs succeeded)")
    for r in results:
        status = "failed" if r.failed else f"AA={r.metrics['aa']:.2f} AUC={r.metrics['auc']:.2f}"
        print(f"run seed={r.seed}: epochs={r.epochs} {status}")
    return 0 if ok else _RUNTIME_EXIT


def cmd_compare(args) -> int:
    dataset = load_dataset(args.data)
    train_cfg = _train_config(args)
    results = run_comparison(
        train_cfg,
        dataset,
        merge=args.merge,
        gate=args.gate,
        progress=lambda msg: print(f"[compare] {msg}", file=sys.stderr, flush=True),
        model_overrides={"aux_weight": args.aux_weight},
    )
    out = Path(args.out)
    write_results(out / "results.jsonl", results)
    _write_config(out, args)
    markdown, csv = build_report([r.to_json() for r in results])
    write_atomic(out / "report.md", markdown)
    write_atomic(out / "report.csv", csv)
    print(f"wrote {out / 'results.jsonl'}")
    print(markdown)
    return 0


def cmd_report(args) -> int:
    rows = read_results(args.results)
    markdown, csv = build_report(rows)
    out = Path(args.out)
    write_atomic(out / "report.md", markdown)
    write_atomic(out / "report.csv", csv)
    _write_config(out, args)
    print(markdown)
    return 0


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "compare": cmd_compare, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except (NumericError, MvfusionError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return _RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
