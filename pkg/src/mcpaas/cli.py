"""Command line entry point.

    mcpaas run <scenario.json> --seed N --out DIR
    mcpaas availability --mtbf H --mttr H
    mcpaas recovery <scenario.json> --seed N
    mcpaas overhead <baseline-dir> <platform-dir>
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .harness import AvailabilityReport, ScenarioError, measure_recovery, overhead_report, run_scenario


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _cmd_run(args) -> int:
    out = Path(args.out)
    result = run_scenario(args.scenario, seed=args.seed, state_dir=out / "state")
    result.write(out)
    agg = result.report["aggregate"]
    print(
        f"{result.report['scenario']}: {agg['total_requests']} requests, {agg['failed']} failed "
        f"({100 * agg['failed_fraction']:.2f}%), mean {agg['mean_response_ms']:.1f} ms -> {out}"
    )
    return 0


def _cmd_availability(args) -> int:
    rep = AvailabilityReport.compute(args.mtbf, args.mttr)
    _print({"mtbf": rep.mtbf, "mttr": rep.mttr, "availability": rep.availability, "percent": rep.percent})
    return 0


def _cmd_recovery(args) -> int:
    _print(measure_recovery(args.scenario, seed=args.seed))
    return 0


def _cmd_overhead(args) -> int:
    _print(overhead_report(args.baseline, args.platform))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcpaas", description="Multi-cloud PaaS control plane simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a scenario and write report.json, series.csv, events.ndjson")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("availability", help="MTBF / (MTBF + MTTR)")
    p.add_argument("--mtbf", type=float, required=True, help="hours")
    p.add_argument("--mttr", type=float, required=True, help="hours")
    p.set_defaults(func=_cmd_availability)

    p = sub.add_parser("recovery", help="run a failure script and summarize recovery times")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_recovery)

    p = sub.add_parser("overhead", help="relative execution-time overhead of two run directories")
    p.add_argument("baseline")
    p.add_argument("platform")
    p.set_defaults(func=_cmd_overhead)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
