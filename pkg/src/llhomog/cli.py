"""Command-line front end.

Usage: llhomog <command> [--config path] [--out dir] [--eps v[,v...]]
       [--J n] [--sigma v]

Commands: cell, fine, hom, correct, compare, sweep, fig1.  Flag overrides
beat config-file values.  Exit codes: 0 pass, 2 tolerance failure,
3 configuration error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import SimConfig, apply_overrides, parse_config
from .errors import ConfigError, LlhomogError, NumericalError
from .experiments import COMMANDS, run_command

EXIT_PASS = 0
EXIT_TOLERANCE = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="llhomog",
        description="Periodic homogenization toolkit for oscillatory-"
                    "coefficient magnetization dynamics",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="config file (key = value with [sections])")
    parser.add_argument("--out", help="output directory (beats the config value)")
    parser.add_argument("--eps", help="eps value or comma list, e.g. 1/70 or 0.1,0.05")
    parser.add_argument("--J", type=int, help="number of correctors (0, 1, or 2)")
    parser.add_argument("--sigma", help="final-time exponent in [0, 2]")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else SimConfig()
        cfg.validate()
        cfg = apply_overrides(cfg, out_dir=args.out, eps=args.eps, J=args.J,
                              sigma=args.sigma)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = run_command(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LlhomogError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    sys.stdout.write(result.summary)
    return EXIT_PASS if result.ok else EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
