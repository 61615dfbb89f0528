"""Command line: ``orthograd train`` and ``orthograd summarise``."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiment import (
    MixedConfigError,
    RunConfig,
    format_summary,
    load_config,
    run_experiment,
    summarise,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 3

# flag -> RunConfig field
_OVERRIDES = {
    "optimiser": "optimiser",
    "transform": "transform",
    "batch_size": "batch_size",
    "lr": "lr",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "epochs": "epochs",
    "seeds": "seeds",
    "out": "out",
    "model": "model",
    "precision": "precision",
    "name": "name",
    "train_subset": "train_subset",
}


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orthograd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a seeded training experiment")
    train.add_argument("--config", help="JSON config, or a metrics CSV to relaunch from its header")
    train.add_argument("--optimiser", "--optimizer", choices=["sgdm", "adam", "lars"])
    train.add_argument("--transform", choices=["identity", "orth", "norm", "colnorm", "none"])
    train.add_argument("--skip-dense", action="store_true", default=None,
                       help="do not orthogonalise dense-layer gradients")
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--momentum", type=float)
    train.add_argument("--weight-decay", type=float)
    train.add_argument("--epochs", type=int)
    train.add_argument("--seeds", type=_seeds)
    train.add_argument("--data", help="CIFAR-10 binary directory (selects the cifar10 dataset)")
    train.add_argument("--out", help="output directory")
    train.add_argument("--model", choices=["basic_cnn", "small_cnn", "linear"])
    train.add_argument("--precision", choices=["float32", "float64"])
    train.add_argument("--name")
    train.add_argument("--train-subset", type=int)

    summ = sub.add_parser("summarise", aliases=["summarize"], help="mean ± standard error across seeds")
    summ.add_argument("--in", dest="in_dir", required=True, help="run directory")
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Config file fields, overridden by any flags given on the command line."""
    base = load_config(args.config).to_dict() if args.config else RunConfig().to_dict()
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if args.skip_dense:
        base["skip_dense"] = True
    if args.data:
        base["dataset"] = "cifar10"
        base["data_dir"] = args.data
    return RunConfig.from_dict(base)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            config = effective_config(args)
            results = run_experiment(config)
            print(format_summary(summarise(config.out)))
            return EXIT_DIVERGED if any(r.status == "diverged" for r in results) else EXIT_OK
        print(format_summary(summarise(args.in_dir)))
        return EXIT_OK
    except (ValueError, FileNotFoundError, MixedConfigError) as exc:
        print(f"orthograd: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
