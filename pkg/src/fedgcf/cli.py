"""Command-line entry points.

  fedgcf run <config> [--set key=value ...] [--workers N]
  fedgcf partition <config> [--set key=value ...]   # emit the manifest only
  fedgcf eval <checkpoint> <config> [--set key=value ...]

Config files are flat key=value text (schema in config.py); --set pairs
override file keys, and --workers is shorthand for --set workers=N. The
FEDGCF_OUTPUT_DIR environment variable overrides the configured output root.
"""
from __future__ import annotations

import argparse
import sys

from .config import load_config, parse_overrides
from .experiment import eval_checkpoint, run_experiment, run_partition_only


def _add_common(sub):
    sub.add_argument("config", help="path to a key=value config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config key")
    sub.add_argument("--workers", type=int, default=None,
                     help="cap on parallel clients")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgcf",
        description="federated graph collaborative filtering experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="run a full experiment")
    _add_common(run)

    part = subs.add_parser("partition", help="emit the partition manifest only")
    _add_common(part)

    ev = subs.add_parser("eval", help="re-score a saved checkpoint")
    ev.add_argument("checkpoint", help="path to a checkpoint.npz")
    _add_common(ev)
    return parser


def _load(args):
    overrides = parse_overrides(args.overrides)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except (ValueError, OSError) as exc:
        print(f"fedgcf: error: {exc}", file=sys.stderr)
        return 1

    if args.command == "run":
        return run_experiment(cfg)
    if args.command == "partition":
        return run_partition_only(cfg)
    try:
        result = eval_checkpoint(args.checkpoint, cfg)
    except Exception as exc:
        print(f"fedgcf: error: {exc}", file=sys.stderr)
        return 1
    for metric, value in sorted(result["aggregate"].items()):
        print(f"{metric}@{result['k']}: {value:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
