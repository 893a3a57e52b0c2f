"""Grid-refinement ladder for the discounted LQ problem against its Riccati value P x^2 + q."""

import argparse

import numpy as np

from nearopt.grid import Grid
from nearopt.hjb import SolverConfig, solve_discounted
from nearopt.problems import builtin_problem, lq_discounted_gain


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--spacings", type=float, nargs="+", default=[0.2, 0.1, 0.05, 0.025])
    ap.add_argument("--box", type=float, default=4.0)
    ap.add_argument("--alpha", type=float, default=1.0)
    args = ap.parse_args()
    p = builtin_problem("lq", {"discount": args.alpha})
    P = lq_discounted_gain(args.alpha)
    q = 2 * 0.5 * P / args.alpha  # a = sigma^2 / 2 with sigma = 1
    print("h,value_at_0.5,inner_rel_sup_error,iterations")
    for h in args.spacings:
        g = Grid.from_spacing([-args.box], [args.box], h)
        vf = solve_discounted(p, g, SolverConfig(tolerance=1e-10))
        x = g.points[:, 0]
        m = g.inner_mask(0.5).ravel()
        exact = P * x ** 2 + q
        err = np.max(np.abs(vf.values.ravel() - exact)[m]) / np.max(np.abs(exact[m]))
        print(f"{h},{vf.at([0.5]):.10f},{err:.3e},{vf.info['iterations']}")


if __name__ == "__main__":
    main()
