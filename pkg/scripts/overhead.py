"""Platform overhead: baseline vs platform-managed execution time."""

import argparse
import json
import tempfile
from pathlib import Path

from mcpaas.harness import overhead_report, run_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        dirs = []
        for name in ("overhead_baseline", "overhead_platform"):
            dirs.append(run_scenario(SCENARIOS / f"{name}.json", seed=args.seed).write(Path(tmp) / name))
        print(json.dumps(overhead_report(*dirs), indent=2))


if __name__ == "__main__":
    main()
