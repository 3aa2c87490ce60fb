"""Command-line experiment runner.

Subcommands:
    build-bench   materialize the benchmark (dataset CSV + manifest)
    train         run federated training, write checkpoint + metrics JSONL
    personalize   adapt a trained checkpoint to each new client, write CSV
    diagnose      collapse / compression / coefficient-heatmap sweeps

Common flags: --config PATH, --seed N, --out DIR, --set KEY=VALUE (repeatable).
FEDBASIS_THREADS caps per-round client-update parallelism (default 1).

Exit status: 0 on success, 1 on configuration/validation errors, 2 on
runtime errors. Errors print one machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ExperimentConfig
from .errors import ConfigError, FedBasisError
from .runner import cmd_build_bench, cmd_diagnose, cmd_personalize, cmd_train


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (dotted path, repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbasis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("build-bench", help="write dataset CSV and manifest"))
    _add_common(sub.add_parser("train", help="run federated training"))

    p = sub.add_parser("personalize", help="personalize a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None)

    p = sub.add_parser("diagnose", help="collapse / compression / heatmap sweeps")
    _add_common(p)
    p.add_argument(
        "--mode", choices=("collapse", "compression", "heatmap"), default="collapse"
    )
    return parser


def _max_workers() -> int:
    raw = os.environ.get("FEDBASIS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FEDBASIS_THREADS must be an integer, got {raw!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(
            config_path=args.config,
            overrides=args.overrides,
            seed=args.seed,
            out_dir=None if args.out is None else str(args.out),
        )
        workers = _max_workers()
        if args.command == "build-bench":
            written = cmd_build_bench(cfg)
        elif args.command == "train":
            written = cmd_train(cfg, max_workers=workers)
        elif args.command == "personalize":
            written = cmd_personalize(cfg, checkpoint_path=args.checkpoint)
        else:
            written = cmd_diagnose(cfg, args.mode, max_workers=workers)
    except ConfigError as err:
        print(f"fedbasis: error: validation: {err}", file=sys.stderr)
        return 1
    except (FedBasisError, OSError) as err:
        print(f"fedbasis: error: runtime: {err}", file=sys.stderr)
        return 2
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
