"""
Command-line front end.

::

    lanesmith run --config run.json --out results/
    lanesmith grid --v0 0.5,1:5 --d0 4:10:2 --workers 4 --out grid/
    lanesmith path-study --offsets 0,0.3,0.5 --v0 2 --d0 10
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from . import __version__
from .config import RunConfig, load_config, with_overrides
from .errors import LanesmithError
from .harness import DEFAULT_D0_SET, DEFAULT_PATH_OFFSETS, DEFAULT_V0_SET, run_grid, run_path_study, run_scenario
from .value_spec import parse_values

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED_RUN = 1
EXIT_ERROR = 2


def _values(text: str) -> List[float]:
    try:
        return parse_values(text)
    except LanesmithError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--out", help="output directory for traces and summaries")
    parser.add_argument("--seed", type=int, help="override random_seed")
    parser.add_argument("--duration", type=float, help="override sim_duration_s (s)")
    parser.add_argument("--lambda", dest="lam", type=int, help="override the replanning stride")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lanesmith", description="CILQR lane-change planning in dense traffic")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one closed-loop scenario")
    _add_common(run)
    run.add_argument("--v0", type=float, help="initial speed (m/s)")
    run.add_argument("--d0", type=float, help="bumper-to-bumper gap (m)")

    grid = sub.add_parser("grid", help="sweep initial speeds and gaps")
    _add_common(grid)
    grid.add_argument("--v0", type=_values, default=list(DEFAULT_V0_SET), help="speeds, e.g. 0.5,1:5")
    grid.add_argument("--d0", type=_values, default=list(DEFAULT_D0_SET), help="gaps, e.g. 4:10:2")
    grid.add_argument("--workers", type=int, default=1, help="worker processes")

    study = sub.add_parser("path-study", help="compare fixed desired-path offsets")
    _add_common(study)
    study.add_argument("--offsets", type=_values, default=list(DEFAULT_PATH_OFFSETS), help="e.g. 0,0.3,0.5")
    study.add_argument("--v0", type=float, help="initial speed (m/s)")
    study.add_argument("--d0", type=float, help="bumper-to-bumper gap (m)")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    if args.quiet:
        level = logging.WARNING
    elif args.verbose >= 2:
        level = logging.DEBUG
    else:
        level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s: %(name)s: %(message)s")


def _base_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    return with_overrides(
        config,
        duration=args.duration,
        lam=args.lam,
        seed=args.seed,
        output_dir=args.out,
        v0=getattr(args, "v0", None) if args.command != "grid" else None,
        d0=getattr(args, "d0", None) if args.command != "grid" else None,
    )


def _print(document) -> None:
    print(json.dumps(document, indent=2))


def _dispatch(args: argparse.Namespace) -> int:
    config = _base_config(args)
    if args.command == "run":
        summary = run_scenario(config).summary
        _print(summary.to_dict())
        return EXIT_OK if summary.success else EXIT_FAILED_RUN
    if args.command == "grid":
        result = run_grid(args.v0, args.d0, config, workers=args.workers)
        _print({
            "cells": [
                {"v0": r.v0, "d0": r.d0, "success": r.success, "error": r.error,
                 "completion_time_s": r.summary.completion_time_s if r.summary else None}
                for r in result.rows
            ],
            "success_rate": result.success_rate,
        })
        return EXIT_OK if result.success_rate == 1.0 else EXIT_FAILED_RUN
    study = run_path_study(args.offsets, config)
    _print([
        {"offset": s.offset, "success": s.summary.success, "max_overshoot": s.max_overshoot,
         "max_abs_yaw": s.max_abs_yaw}
        for s in study.series
    ])
    return EXIT_OK if all(s.summary.success for s in study.series) else EXIT_FAILED_RUN


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the ``lanesmith`` console script; returns the exit code."""
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        return _dispatch(args)
    except LanesmithError as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
