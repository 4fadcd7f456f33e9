"""Command line entry point.

Exit codes: 0 success, 1 numerical fault or failed check, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, load_config
from .harness import default_stages, run_experiment
from .model import InvariantViolation, ModelError

COMMANDS = {
    "simulate": lambda spec: {"simulate"},
    "filter": lambda spec: default_stages(spec) - {"bounds", "sweep"},
    "analyze": lambda spec: default_stages(spec) | {"bounds"},
    "sweep": lambda spec: {"sweep"},
    "validate": lambda spec: {"validate"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eh2d", description="Filtering for 2-D shift-varying systems with energy harvesting sensors")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate states, energy buffers and observations",
        "filter": "run the filter and write estimates and covariances",
        "analyze": "filter plus the covariance bounds",
        "sweep": "trace of the error covariance versus a uniform activation probability",
        "validate": "Monte Carlo check of unbiasedness, covariance and the energy bound",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, action="append", help="override the seeds (repeatable)")
        p.add_argument("--out", help="output directory (default: config 'output')")
        p.add_argument("--mode", choices=("zero", "mc"), help="override filter.mode")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = load_config(args.config)
        if args.seed:
            spec = dataclasses.replace(spec, seeds=list(args.seed))
        if args.mode:
            spec = dataclasses.replace(spec, filter=dataclasses.replace(spec.filter, mode=args.mode))
        stages = COMMANDS[args.command](spec)
        if args.command == "sweep" and spec.analysis.sweep is None:
            raise ConfigError("analysis.sweep: required by the sweep command")
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        result = run_experiment(spec, args.out, stages)
    except InvariantViolation as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 1
    for msg in result.messages:
        print(msg)
    print(f"wrote {len(result.files)} files to {result.out_dir}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
