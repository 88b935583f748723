"""Master recovery timings for the leader and follower kill scenarios."""

import argparse
from pathlib import Path

from mcpaas.harness import measure_recovery

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    print("scenario       seed  detect_ms  elect_start_ms  redeploy_s  total_min")
    for name in ("kill_leader", "kill_follower"):
        for seed in args.seeds:
            for r in measure_recovery(SCENARIOS / f"{name}.json", seed=seed)["recoveries"]:
                print(f"{name:<13}  {seed:>4}  {r['detection_ms']:>9.0f}  {r['elect_start_ms']:>14.0f}"
                      f"  {r['redeploy_ms'] / 1000:>10.1f}  {r['total_ms'] / 60000:>9.2f}")


if __name__ == "__main__":
    main()
