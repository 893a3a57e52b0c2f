"""Command-line entry point: ``nearopt <verb> SPEC [--set key=value ...]``.

Exit codes: 0 success, 2 threshold miss, 3 solver failure, 4 invalid spec.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import hjb
from .dynamics import InvalidInputError, check_assumptions
from .experiments import (ExperimentSpec, SpecError, build_grid, build_problem, hjb_value, mc_cost, pde_cost,
                          probe_point, run_continuity_sweep, run_near_optimality, solve, solver_config)
from .policy import dumps_field, dumps_policy, lipschitz_estimate, loads_policy, mollify

EXIT_OK, EXIT_MISS, EXIT_SOLVER, EXIT_SPEC = 0, 2, 3, 4


def _out_dir(spec: ExperimentSpec, args) -> Path | None:
    d = args.out or spec.output_dir
    if d is None:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_solve(spec, args) -> int:
    sol = solve(spec)
    x0 = probe_point(spec, sol.problem)
    info = {"criterion": spec.criterion, "iterations": sol.value.info.get("iterations"),
            "lattice_defect": sol.value.info.get("lattice_defect")}
    if sol.rho is not None:
        info["rho"] = sol.rho
    else:
        info["value_at_x0"] = hjb_value(sol, x0)
    print(json.dumps(info, default=float))
    out = _out_dir(spec, args)
    if out:
        (out / "value.txt").write_text(dumps_field(sol.value))
        (out / "selector.txt").write_text(dumps_policy(sol.selector))
        if sol.value.residuals:
            (out / "residuals.csv").write_text(hjb.residual_csv(sol.value.residuals))
    return EXIT_OK


def cmd_mollify(spec, args) -> int:
    if args.policy:
        policy = loads_policy(Path(args.policy).read_text())
    else:
        policy = solve(spec).selector
    out = _out_dir(spec, args)
    for eta in spec.eta_ladder:
        v = mollify(policy, eta, spec.time_bandwidth)
        print(f"eta={eta:g} lipschitz={lipschitz_estimate(v):.6g}")
        if out:
            (out / f"mollified_eta{eta:g}.txt").write_text(dumps_policy(v))
    return EXIT_OK


def cmd_evaluate(spec, args) -> int:
    sol = solve(spec)
    policy = loads_policy(Path(args.policy).read_text()) if args.policy else sol.selector
    x0 = probe_point(spec, sol.problem)
    res = {}
    if spec.evaluation in ("pde", "both"):
        res["pde_cost"] = pde_cost(sol, policy, spec.criterion, x0)
    if spec.evaluation in ("mc", "both"):
        est = mc_cost(spec, sol.problem, policy, x0, spec.seed)
        res.update(mc_cost=est.mean, mc_std_error=est.std_error, mc_flags=list(est.flags))
    print(json.dumps(res, default=float))
    return EXIT_OK


def cmd_near_opt(spec, args) -> int:
    report = run_near_optimality(spec, workers=args.workers)
    print(report.summary(), end="")
    out = _out_dir(spec, args)
    if out:
        report.write(out)
    return EXIT_OK if report.passed() else EXIT_MISS


def cmd_sweep(spec, args) -> int:
    table = run_continuity_sweep(spec, workers=args.workers)
    print(table.to_csv(), end="")
    out = _out_dir(spec, args)
    if out:
        (out / "continuity_sweep.csv").write_text(table.to_csv())
    return EXIT_OK if table.passes() else EXIT_MISS


def cmd_check(spec, args) -> int:
    problem = build_problem(spec)
    grid = build_grid(spec, problem)
    samples = solver_config(spec).samples(problem)
    report = check_assumptions(problem, grid, samples, rho_candidate=args.rho)
    print(report.summary())
    return EXIT_OK if report.ok() else EXIT_MISS


VERBS = {
    "solve": cmd_solve,
    "mollify": cmd_mollify,
    "evaluate": cmd_evaluate,
    "near-opt": cmd_near_opt,
    "sweep": cmd_sweep,
    "check-assumptions": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nearopt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    for name in VERBS:
        p = sub.add_parser(name)
        p.add_argument("spec", help="experiment spec (JSON)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a spec entry, e.g. --set grid.spacing=0.05")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, default=None)
        if name in ("mollify", "evaluate"):
            p.add_argument("--policy", help="policy text file (default: the solved selector)")
        if name == "check-assumptions":
            p.add_argument("--rho", type=float, default=None, help="candidate ergodic value for the near-monotone check")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExperimentSpec.load(args.spec, args.overrides)
    except (SpecError, InvalidInputError, TypeError) as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return EXIT_SPEC
    try:
        return VERBS[args.verb](spec, args)
    except hjb.SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        if exc.history:
            print(f"last residuals: {np.asarray(exc.history[-5:]).tolist()}", file=sys.stderr)
        return EXIT_SOLVER
    except (SpecError, InvalidInputError) as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
