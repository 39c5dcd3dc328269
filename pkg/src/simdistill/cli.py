"""Command-line entry point.

    simdistill CONFIG [--seed N] [--output-dir DIR] [--rows a,b] \
               [--widths 1.0,0.5] [-v | -q]

Runs the configured scenario, writes the results grid, the machine-readable
results lines, checkpoints, and (for width sweeps) capacity-vs-mAP series,
then prints every written path.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import ConfigError
from .experiments import run
from .scenario import parse_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simdistill",
        description="Multi-teacher similarity distillation experiments on synthetic domains",
    )
    parser.add_argument("config", help="path to a scenario config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--output-dir", default=None, help="override the output directory")
    parser.add_argument("--rows", default=None, help="comma-separated subset of rows to run")
    parser.add_argument("--widths", default=None, help="comma-separated student width subset")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress the path listing")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return 2

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.rows is not None:
        overrides["rows"] = tuple(r.strip() for r in args.rows.split(",") if r.strip())
    if args.widths is not None:
        overrides["student_widths"] = tuple(float(w) for w in args.widths.split(","))
    if overrides:
        cfg = replace(cfg, **overrides)

    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else (lambda msg: None)
    try:
        cfg.validate()
        _, written = run(cfg, log=log)
    except ConfigError as exc:
        print(f"error: scenario {cfg.scenario_id!r}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: scenario {cfg.scenario_id!r} failed: {exc}", file=sys.stderr)
        raise

    if not args.quiet:
        for path in written:
            print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
