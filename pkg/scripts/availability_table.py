"""Availability for a one-year MTBF across a range of repair times."""

import argparse

from mcpaas.harness import AvailabilityReport


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mtbf", type=float, default=8760.0, help="hours")
    ap.add_argument("--mttr", type=float, nargs="+", default=[0.06, 0.5, 1.0, 3.5 / 60, 7.5, 24.0], help="hours")
    args = ap.parse_args()
    print("mttr_h     availability  downtime_min_per_year")
    for mttr in args.mttr:
        rep = AvailabilityReport.compute(args.mtbf, mttr)
        down = (1 - rep.availability) * 365 * 24 * 60
        print(f"{mttr:<9.4g}  {rep.percent:>12}  {down:>21.1f}")


if __name__ == "__main__":
    main()
