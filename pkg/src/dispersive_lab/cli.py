"""Command line entry point: ``dispersive-lab run <scenario-file> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import CHECKS, ScenarioError, load_scenario, run_scenario


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dispersive-lab",
                                description="Run dispersive-estimate scenarios and write CSV reports.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("scenario", help="flat 'key = value' scenario file")
    r.add_argument("--grid-n", type=int, help="points per axis (overrides grid.n)")
    r.add_argument("--t-max", type=float, help="time horizon (overrides time.max)")
    r.add_argument("--dt", type=float, help="propagator step (overrides time.dt)")
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--checks", help=f"comma list from: {', '.join(CHECKS)} (overrides checks)")
    r.add_argument("--seed", type=int, default=None, help="seed for random source suites")
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sc = load_scenario(args.scenario)
        checks = None
        if args.checks is not None:
            checks = tuple(c.strip() for c in args.checks.split(",") if c.strip())
        sc = sc.with_overrides(n=args.grid_n, t_max=args.t_max, dt=args.dt, checks=checks,
                               seed=args.seed)
    except ScenarioError as exc:
        print(f"error: {args.scenario}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = run_scenario(sc)
    report.write(args.out)
    for r in report.results:
        print(f"{r.check:12s} {r.status:12s} value={r.value:.6g} err={r.error_estimate:.3g}"
              + (f"  ({r.message})" if r.message else ""))
    print(f"wrote {args.out}/summary.csv ({len(report)} checks)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
