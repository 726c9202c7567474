"""Command-line entry point: ``odmoe run|validate|list-experiments``."""

from __future__ import annotations

import argparse
import logging
import sys

from .cluster import EQ1_MODES
from .errors import ODMoEError
from .experiments import KINDS, SpecError, load_spec, plan_rows, run_experiment

log = logging.getLogger("odmoe")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odmoe", description="Toy-scale on-demand MoE inference experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def spec_args(p):
        p.add_argument("--spec", required=True, help="experiment spec (INI)")
        p.add_argument("--eq1", choices=EQ1_MODES, default=None,
                       help="load-budget multiplier: number of groups (default) or group size")

    run = sub.add_parser("run", help="run an experiment spec")
    spec_args(run)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    validate = sub.add_parser("validate", help="check a spec without running it")
    spec_args(validate)

    sub.add_parser("list-experiments", help="list experiment kinds")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "list-experiments":
        for name, text in KINDS.items():
            print(f"{name:16s} {text}")
        return 0

    try:
        spec = load_spec(args.spec, args.eq1)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {args.spec}: {exc.strerror}", file=sys.stderr)
        return 2

    rows = plan_rows(spec)
    runs = len(spec.seeds) * spec.prompts.count * len(spec.prompts.lengths)
    if args.command == "validate":
        print(f"ok: {spec.kind} '{spec.name}', {len(rows)} rows x {runs} runs, eq1={spec.eq1}")
        return 0

    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    log.info("running %s: %d rows x %d runs", spec.kind, len(rows), runs)
    try:
        run_experiment(spec, args.out, args.jobs)
    except ODMoEError as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}/summary.csv ({len(rows)} rows)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
