"""Command-line entry point: ``prooflab <command> [--config PATH] [--seed N] ...``."""
from __future__ import annotations

import argparse
import sys

from .errors import ContractError, ParameterError
from .experiments import build_config, load_config, run_experiment

COMMANDS = {
    "gen": "generate",
    "sample": "sampler-exactness",
    "train": "estimate-params",
    "search": "search",
    "verify": "verify-bounds",
    "separate": "separation",
    "probe": "generalization-probe",
}

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prooflab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, experiment in COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {experiment} pipeline")
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=_seed, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--trials", type=_positive, help="number of trials")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 is reserved for violations here
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    experiment = COMMANDS[args.command]
    overrides = dict(seed=args.seed, out=args.out, trials=args.trials)
    try:
        if args.config:
            cfg = load_config(args.config, experiment, **overrides)
        else:
            cfg = build_config(experiment, None, **overrides)
    except (ContractError, ParameterError, OSError) as exc:
        print(f"prooflab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report, paths = run_experiment(cfg)
    for p in paths:
        print(p)
    if report.violations:
        print(f"prooflab: {report.violations} invariant violation(s)", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
