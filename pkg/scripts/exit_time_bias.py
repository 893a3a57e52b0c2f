"""Monte Carlo exit-time bias for Brownian motion on (-1, 1), with and without the bridge correction."""

import argparse

from nearopt.problems import builtin_problem
from nearopt.sde import SimConfig, estimate_exit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=20000)
    ap.add_argument("--steps", type=float, nargs="+", default=[0.04, 0.01, 0.0025])
    args = ap.parse_args()
    p = builtin_problem("brownian_exit")
    print("dt,correction,mean,std_error,bias")
    for dt in args.steps:
        for corr in ("linear", "bridge"):
            est = estimate_exit(p, 0.0, [0.0], SimConfig(dt=dt, horizon=20.0, paths=args.paths, seed=1,
                                                          exit_correction=corr))
            print(f"{dt},{corr},{est.mean:.5f},{est.std_error:.1e},{est.mean - 0.5:+.4f}")


if __name__ == "__main__":
    main()
