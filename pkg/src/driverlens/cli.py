"""``driverlens`` command line.

Exit codes: 0 success, 2 configuration error, 3 validation failure,
4 incomplete report.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import ConfigError, DriverLensError, ReportIncomplete, ValidationError

log = logging.getLogger("driverlens")

COMMANDS = {
    "simulate": pipeline.run_simulate,
    "bench": pipeline.run_bench,
    "sweep": pipeline.run_sweep,
    "probe": pipeline.run_probe,
    "report": pipeline.run_report,
    "all": pipeline.run_all,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="driverlens", description="Measure how much forecasters use driver data.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="master seed (mandatory unless set in the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes for independent tasks")
    common.add_argument("--preset", help="diary fidelity preset for bench/probe")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, workers=args.workers, preset=args.preset)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"driverlens: configuration error: {exc}", file=sys.stderr)
        return 2
    except ReportIncomplete as exc:
        print(f"driverlens: {exc}", file=sys.stderr)
        return 4
    except (ValidationError, DriverLensError) as exc:
        print(f"driverlens: {exc}", file=sys.stderr)
        return 3
    log.info("%s finished; outputs in %s", args.command, cfg.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
