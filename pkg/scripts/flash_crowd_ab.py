"""Flash-crowd A/B: the same workload with elasticity off and on."""

import argparse
from pathlib import Path

from mcpaas.harness import run_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=None, help="write each run under this directory")
    args = ap.parse_args()
    print("seed  mode  requests  failed%   steady_ms  scale_outs  episodes")
    for seed in args.seeds:
        for mode in ("off", "on"):
            res = run_scenario(SCENARIOS / f"flash_crowd_{mode}.json", seed=seed)
            if args.out:
                res.write(args.out / f"{mode}-{seed}")
            agg, el = res.report["aggregate"], res.report["elasticity"]
            print(f"{seed:>4}  {mode:>4}  {agg['total_requests']:>8}  {100 * agg['failed_fraction']:>7.3f}"
                  f"  {el['steady_mean_response_ms']:>10.2f}  {el['scale_outs']:>10}  {el['overload_episodes']:>8}")


if __name__ == "__main__":
    main()
