"""
rtree - reinforced tree walk experiments

Command-line runner: loads an experiment spec (or a built-in preset), fans the
replicas out over worker processes and writes a result bundle.

    python app.py list
    python app.py run <spec-path-or-preset> [--workers W] [--out DIR] [--seed S]
    python app.py oracle-check <spec-path> [--workers W] [--out DIR] [--seed S]
    python app.py history [--limit N] [--out DIR]

A bundle directory (or its summary.json) is accepted wherever a spec path is,
which reruns the exact spec that produced it.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from core.estimators import InsufficientDataError
from core.experiments import ExperimentKind, SpecError, list_experiments, load_spec, run_experiment
from core.storage import get_bundle_history
from core.walk import ResourceLimitError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_RESOURCE = 3

logger = logging.getLogger("rtree")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtree", description="Reinforced random walks on b-ary trees.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list the built-in experiment presets")

    for command, help_text in (
        ("run", "run an experiment spec file or preset"),
        ("oracle-check", "compare Monte Carlo against exact enumeration for a spec"),
    ):
        cmd = sub.add_parser(command, help=help_text)
        cmd.add_argument("spec", help="spec file path (key = value or JSON) or preset name")
        cmd.add_argument("--workers", type=int, default=None, help="worker processes (default: RTREE_WORKERS or 1)")
        cmd.add_argument("--out", default=None, help="output directory (default: RTREE_OUTPUT_DIR or ./outputs)")
        cmd.add_argument("--seed", type=int, default=None, help="override the spec seed")

    history = sub.add_parser("history", help="list recently written bundles, newest first")
    history.add_argument("--limit", type=int, default=20, help="number of bundles to show")
    history.add_argument("--out", default=None, help="output directory (default: RTREE_OUTPUT_DIR or ./outputs)")
    return parser


def cmd_list() -> int:
    for name, description in list_experiments():
        print(f"{name:<20} {description}")
    return EXIT_OK


def cmd_history(limit: int, out: Optional[str]) -> int:
    for record in get_bundle_history(limit=limit, base=Path(out) if out else None):
        print(f"{record.get('indexed_at', '')[:19]}  {record.get('kind', ''):<13} {record.get('name', ''):<20} {record.get('bundle', '')}")
    return EXIT_OK


def cmd_run(spec_ref: str, workers: Optional[int], out: Optional[str], seed: Optional[int], force_oracle: bool) -> int:
    spec = load_spec(spec_ref)
    if force_oracle:
        spec = replace(spec, kind=ExperimentKind.ORACLE_CHECK)
    bundle = run_experiment(spec, workers=workers, out=out, seed=seed)
    print(bundle.summary_path)
    for note in bundle.notes:
        print(f"note: {note}", file=sys.stderr)
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    """Main application entry point."""
    load_dotenv()
    logging.basicConfig(
        level=os.environ.get("RTREE_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)

    try:
        if args.command == "list":
            return cmd_list()
        if args.command == "history":
            return cmd_history(args.limit, args.out)
        return cmd_run(args.spec, args.workers, args.out, args.seed, force_oracle=args.command == "oracle-check")
    except SpecError as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except ResourceLimitError as e:
        logger.error(f"Resource limit: {e}")
        return EXIT_RESOURCE
    except InsufficientDataError as e:
        logger.error(f"Experiment failed: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
