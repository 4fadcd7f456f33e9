#!/usr/bin/env python3
"""Run every config under configs/ through the full pipeline and print a summary.

Usage: python3 scripts/run_experiments.py [--configs DIR] [--out DIR] [--validate]
"""
import argparse
import sys
import time
from pathlib import Path

from eh2d.config import ConfigError, load_config
from eh2d.harness import default_stages, run_experiment
from eh2d.model import InvariantViolation

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--configs", type=Path, default=ROOT / "configs")
    parser.add_argument("--out", type=Path, default=ROOT / "out")
    parser.add_argument("--validate", action="store_true", help="also run the Monte Carlo battery")
    args = parser.parse_args(argv)

    status = 0
    for path in sorted(args.configs.glob("*.yaml")):
        t0 = time.perf_counter()
        try:
            spec = load_config(path)
            stages = default_stages(spec) | {"bounds"} if spec.analysis.bounds else default_stages(spec)
            if args.validate:
                stages |= {"validate"}
            res = run_experiment(spec, args.out / path.stem, stages)
        except (ConfigError, InvariantViolation) as exc:
            print(f"{path.name}: ERROR {exc}")
            status = 1
            continue
        verdict = "ok" if res.passed else "CHECK FAILED"
        print(f"{path.name}: {verdict}, {len(res.files)} files in {time.perf_counter() - t0:.1f}s -> {res.out_dir}")
        for msg in res.messages:
            print(f"  {msg}")
        status |= 0 if res.passed else 1
    return status


if __name__ == "__main__":
    sys.exit(main())
