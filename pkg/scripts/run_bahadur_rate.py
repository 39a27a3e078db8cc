#!/usr/bin/env python3
"""Remainder-rate study across the sample-size schedule.

Runs quantile and huber losses on shared replication streams and
reports the fitted log-log slope plus the per-n median sup norms.
Expect roughly fifteen minutes at the shipped replication count.
"""

import argparse
import sys
from pathlib import Path

from mlocpoly.cli import parse_and_dispatch

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "rate.toml"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=str(DEFAULT_CONFIG))
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="results")
    parser.add_argument("--format", choices=("csv", "json"), default="json")
    args = parser.parse_args()

    argv = ["bahadur", "--config", args.config, "--out", args.out,
            "--format", args.format]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    return parse_and_dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
