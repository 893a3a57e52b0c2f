"""Run the mollification pipeline and the continuity sweep for one or more spec files.

    python3 scripts/near_optimality.py configs/double_well_discounted.json configs/double_well_ergodic.json --out runs
"""

import argparse
from pathlib import Path

from nearopt.experiments import ExperimentSpec, run_continuity_sweep, run_near_optimality, solve


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("specs", nargs="+")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    for path in args.specs:
        spec = ExperimentSpec.load(path)
        sol = solve(spec)
        report = run_near_optimality(spec, sol, workers=args.workers)
        sweep = run_continuity_sweep(spec, sol, workers=args.workers)
        out = Path(args.out) / Path(path).stem
        report.write(out)
        (out / "continuity_sweep.csv").write_text(sweep.to_csv())
        print(report.summary())
        print(f"continuity sweep {'passes' if sweep.passes() else 'misses'}; written to {out}\n")


if __name__ == "__main__":
    main()
