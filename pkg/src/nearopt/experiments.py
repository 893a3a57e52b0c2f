"""End-to-end pipeline: solve, extract the selector, mollify along an eta ladder, measure gaps."""

from __future__ import annotations

import copy
import io
import json
import math
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__, hjb, sde
from .dynamics import ControlProblem, InvalidInputError
from .grid import Grid, ValueField
from .policy import GridPolicy, default_dictionary, lipschitz_estimate, mollify, pairing_gap
from .problems import builtin_problem
from .rng import derive_seed

EVALUATION_MODES = ("pde", "mc", "both")


class SpecError(InvalidInputError):
    pass


def _schema() -> dict:
    return json.loads(resources.files("nearopt").joinpath("data/spec.schema.json").read_text())


@dataclass
class ExperimentSpec:
    problem: dict
    criterion: str
    eta_ladder: list
    grid: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    time_bandwidth: float | None = None
    evaluation: str = "pde"
    mc: dict = field(default_factory=dict)
    x0: list | None = None
    epsilon: float = 0.05
    relative_epsilon: bool = True  # epsilon is a fraction of |J*|
    seed: int = 0
    workers: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        ladder = [float(e) for e in self.eta_ladder]
        if len(ladder) < 3:
            raise SpecError("eta_ladder needs at least 3 rungs")
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise SpecError("eta_ladder must be strictly decreasing")
        self.eta_ladder = ladder
        if self.evaluation not in EVALUATION_MODES:
            raise SpecError(f"evaluation must be one of {EVALUATION_MODES}")
        if self.criterion not in hjb.CRITERIA:
            raise SpecError(f"criterion must be one of {hjb.CRITERIA}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        try:
            jsonschema.validate(data, _schema())
        except jsonschema.ValidationError as exc:
            raise SpecError(f"invalid spec: {exc.message} at {'/'.join(map(str, exc.absolute_path))}") from None
        return cls(**copy.deepcopy(data))

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "ExperimentSpec":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read spec {path}: {exc}") from None
        for item in overrides or []:
            apply_override(data, item)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def apply_override(data: dict, item: str) -> None:
    """Apply ``dotted.key=value`` in place; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise SpecError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise SpecError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = value


# --------------------------------------------------------------------------
# building blocks

def build_problem(spec: ExperimentSpec) -> ControlProblem:
    return builtin_problem(spec.problem["name"], spec.problem.get("params"))


def build_grid(spec: ExperimentSpec, problem: ControlProblem) -> Grid:
    g = spec.grid
    spacing = g.get("spacing", 0.02)
    if spec.criterion == "exit":
        lo, hi = problem.exit_domain
        return Grid.from_spacing(g.get("lower", lo), g.get("upper", hi), spacing)
    if "lower" not in g or "upper" not in g:
        raise SpecError("grid.lower and grid.upper are required for whole-space criteria")
    if len(g["lower"]) != problem.dim_x or len(g["upper"]) != problem.dim_x:
        raise SpecError("grid bounds do not match the problem dimension")
    return Grid.from_spacing(g["lower"], g["upper"], spacing)


def solver_config(spec: ExperimentSpec) -> hjb.SolverConfig:
    opts = dict(spec.solver)
    if opts.get("anchor") is not None:
        opts["anchor"] = tuple(opts["anchor"])
    if isinstance(opts.get("n_controls"), list):
        opts["n_controls"] = tuple(opts["n_controls"])
    return hjb.SolverConfig(**opts)


def probe_point(spec: ExperimentSpec, problem: ControlProblem) -> np.ndarray:
    if spec.x0 is not None:
        x0 = np.asarray(spec.x0, dtype=float)
        if x0.shape != (problem.dim_x,):
            raise SpecError("x0 does not match the problem dimension")
        return x0
    if spec.criterion == "exit":
        lo, hi = problem.exit_domain
        return 0.5 * (lo + hi)
    return np.zeros(problem.dim_x)


@dataclass
class Solution:
    problem: ControlProblem
    grid: Grid
    value: ValueField
    rho: float | None
    selector: GridPolicy
    config: hjb.SolverConfig


def solve(spec: ExperimentSpec) -> Solution:
    problem = build_problem(spec)
    grid = build_grid(spec, problem)
    cfg = solver_config(spec)
    rho = None
    if spec.criterion == "discounted":
        value = hjb.solve_discounted(problem, grid, cfg)
    elif spec.criterion == "ergodic":
        sol = hjb.solve_ergodic(problem, grid, cfg)
        value, rho = sol.V, sol.rho
    elif spec.criterion == "exit":
        value = hjb.solve_exit(problem, cfg, grid)
    else:
        value = hjb.solve_finite_horizon(problem, grid, cfg)
    return Solution(problem, grid, value, rho, hjb.extract_selector(problem, value, cfg), cfg)


def pde_cost(sol: Solution, policy, criterion: str, x0) -> float:
    return hjb.policy_cost(sol.problem, policy, criterion, sol.grid, x0, sol.config)


def hjb_value(sol: Solution, x0) -> float:
    if sol.rho is not None:
        return sol.rho
    v = sol.value
    if v.grid.has_time:
        return ValueField(v.grid.space_grid(), v.values[0]).at(x0)
    return v.at(x0)


def mc_config(spec: ExperimentSpec, problem: ControlProblem, seed: int) -> sde.SimConfig:
    mc = dict(spec.mc)
    horizon = mc.pop("horizon", None)
    if spec.criterion == "finite_horizon":
        horizon = problem.horizon
    elif horizon is None:
        horizon = {"discounted": 20.0 / (problem.discount or 1.0), "ergodic": 200.0, "exit": 50.0}[spec.criterion]
    return sde.SimConfig(dt=mc.pop("dt", 0.01), horizon=horizon, paths=mc.pop("paths", 2000), seed=seed, **mc)


_ESTIMATORS = {
    "finite_horizon": sde.estimate_finite_horizon,
    "discounted": sde.estimate_discounted,
    "ergodic": sde.estimate_ergodic,
    "exit": sde.estimate_exit,
}


def mc_cost(spec: ExperimentSpec, problem: ControlProblem, policy, x0, seed: int) -> sde.CostEstimate:
    return _ESTIMATORS[spec.criterion](problem, policy, x0, mc_config(spec, problem, seed))


# --------------------------------------------------------------------------
# reports

GAP_COLUMNS = ("eta", "lipschitz", "cost", "gap", "pairing_gap", "mc_cost", "mc_std_error")


@dataclass
class GapRow:
    eta: float
    lipschitz: float
    cost: float
    gap: float
    pairing_gap: float
    mc_cost: float = math.nan
    mc_std_error: float = math.nan


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float):
        return (a == b) or (math.isnan(a) and math.isnan(b))
    return a == b


@dataclass
class GapReport:
    rows: list
    j_star: float
    metadata: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GapReport) or len(self.rows) != len(other.rows):
            return False
        rows_eq = all(_same(getattr(a, c), getattr(b, c)) for a, b in zip(self.rows, other.rows) for c in GAP_COLUMNS)
        return rows_eq and _same(self.j_star, other.j_star) and self.metadata == other.metadata

    @property
    def final_gap(self) -> float:
        return self.rows[-1].gap

    def threshold(self) -> float:
        eps = float(self.metadata.get("epsilon", math.inf))
        return eps * abs(self.j_star) if self.metadata.get("relative_epsilon", True) else eps

    def passed(self) -> bool:
        return self.final_gap <= self.threshold()

    def to_csv(self) -> str:
        meta = dict(self.metadata, j_star=self.j_star)
        out = io.StringIO()
        out.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        out.write(",".join(GAP_COLUMNS) + "\n")
        for r in self.rows:
            out.write(",".join(repr(float(getattr(r, c))) for c in GAP_COLUMNS) + "\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GapReport":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# "):
            raise InvalidInputError("gap report is missing its metadata line")
        meta = json.loads(lines[0][2:])
        j_star = float(meta.pop("j_star"))
        cols = lines[1].split(",")
        rows = [GapRow(**{c: float(v) for c, v in zip(cols, ln.split(","))}) for ln in lines[2:] if ln.strip()]
        return cls(rows, j_star, meta)

    def summary(self) -> str:
        m = self.metadata
        head = [f"problem {m.get('problem')}  criterion {m.get('criterion')}  x0 {m.get('x0')}",
                f"J* = {self.j_star:.6g}   threshold = {self.threshold():.4g}   "
                f"final gap = {self.final_gap:.4g}   {'PASS' if self.passed() else 'MISS'}"]
        cols = [c for c in GAP_COLUMNS if not all(math.isnan(getattr(r, c)) for r in self.rows)]
        table = [cols] + [[f"{getattr(r, c):.6g}" for c in cols] for r in self.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
        body = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in table]
        return "\n".join(head + body) + "\n"

    def write(self, directory, stem: str = "gap_report") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = d / f"{stem}.csv", d / f"{stem}.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.summary())
        return csv_path, txt_path


def _metadata(spec: ExperimentSpec, sol: Solution, x0) -> dict:
    return {
        "problem": spec.problem, "criterion": spec.criterion, "x0": [float(v) for v in x0],
        "seed": spec.seed, "grid": sol.grid.to_dict(), "tolerance": sol.config.tolerance,
        "n_controls": sol.config.n_controls if not isinstance(sol.config.n_controls, tuple)
        else list(sol.config.n_controls),
        "epsilon": spec.epsilon, "relative_epsilon": spec.relative_epsilon,
        "evaluation": spec.evaluation, "hjb_value": hjb_value(sol, x0),
        "lattice_defect": sol.value.info.get("lattice_defect"),
        "versions": {"nearopt": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def mollify_ladder(spec: ExperimentSpec, selector: GridPolicy) -> list:
    return [mollify(selector, eta, spec.time_bandwidth) for eta in spec.eta_ladder]


def run_near_optimality(spec: ExperimentSpec, solution: Solution | None = None,
                        workers: int | None = None) -> GapReport:
    """Gap ``J(v_eta) - J*`` at the probe point for every rung of the ladder.

    ``J*`` is the HJB value at ``x0`` (``rho`` for ergodic). Any policy evaluated
    on the same discretisation costs at least this much, up to the solver
    tolerance and the control-lattice defect. In ``mc`` mode ``J*`` is the Monte
    Carlo cost of the selector instead.
    """
    sol = solution or solve(spec)
    x0 = probe_point(spec, sol.problem)
    workers = workers or spec.workers
    star = sol.selector
    j_star = hjb_value(sol, x0)
    dictionary = default_dictionary(star.grid, star.control_set)

    def rung(item):
        i, eta = item
        v = mollify(star, eta, spec.time_bandwidth)
        row = GapRow(eta, lipschitz_estimate(v), math.nan, math.nan, pairing_gap(star, v, dictionary))
        if spec.evaluation in ("pde", "both"):
            row.cost = pde_cost(sol, v, spec.criterion, x0)
        if spec.evaluation in ("mc", "both"):
            est = mc_cost(spec, sol.problem, v, x0, derive_seed(spec.seed, i))
            row.mc_cost, row.mc_std_error = est.mean, est.std_error
            if spec.evaluation == "mc":
                row.cost = est.mean
        return row

    rows = _map(rung, list(enumerate(spec.eta_ladder)), workers)
    meta = _metadata(spec, sol, x0)
    if spec.evaluation in ("pde", "both"):
        meta["selector_cost"] = pde_cost(sol, star, spec.criterion, x0)
    if spec.evaluation == "mc":
        est = mc_cost(spec, sol.problem, star, x0, derive_seed(spec.seed, len(spec.eta_ladder)))
        j_star = est.mean
        meta["j_star_std_error"] = est.std_error
    for r in rows:
        r.gap = r.cost - j_star
    return GapReport(rows, j_star, meta)


@dataclass
class SweepTable:
    """Rows of ``(eta, pairing_gap, cost_gap)`` along the ladder."""

    rows: list
    j_star: float

    def passes(self, pairing_fraction: float = 0.05, cost_fraction: float = 0.05) -> bool:
        first, last = self.rows[0], self.rows[-1]
        ok_pair = last[1] <= pairing_fraction * first[1] if first[1] > 0 else last[1] == 0
        ok_cost = last[2] <= cost_fraction * abs(self.j_star)
        return bool(ok_pair and ok_cost)

    def to_csv(self) -> str:
        lines = ["eta,pairing_gap,cost_gap"] + [",".join(repr(float(v)) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"


def run_continuity_sweep(spec: ExperimentSpec, solution: Solution | None = None,
                         workers: int | None = None) -> SweepTable:
    report = run_near_optimality(spec, solution, workers)
    # continuity compares v_eta with v* itself, so the reference is J(v*) under the same evaluation
    ref = report.metadata.get("selector_cost", report.j_star)
    rows = [(r.eta, r.pairing_gap, abs(r.cost - ref)) for r in report.rows]
    return SweepTable(rows, report.j_star)


@dataclass
class PerturbationFit:
    deltas: list
    cost_gaps: list
    K: float
    r_squared: float


def run_perturbation_sweep(spec: ExperimentSpec, deltas, base: GridPolicy | None = None,
                           solution: Solution | None = None) -> PerturbationFit:
    """Cost change of ``v + delta`` (projected onto U) against ``delta``.

    ``K`` is the least-squares slope through the origin of ``|J(v + delta) - J(v)|``
    on ``|delta|``, and ``r_squared`` the uncentred coefficient of determination.
    """
    sol = solution or solve(spec)
    x0 = probe_point(spec, sol.problem)
    v = base or sol.selector
    j0 = pde_cost(sol, v, spec.criterion, x0)
    gaps = []
    for dlt in deltas:
        shifted = GridPolicy(v.grid, v.control_set.project(np.asarray(v.values) + dlt), v.control_set, v.interpolation)
        gaps.append(abs(pde_cost(sol, shifted, spec.criterion, x0) - j0))
    d = np.abs(np.asarray(deltas, dtype=float))
    y = np.asarray(gaps)
    K = float(d @ y / (d @ d))
    ss_res = float(np.sum((y - K * d) ** 2))
    ss_tot = float(np.sum(y ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return PerturbationFit([float(x) for x in deltas], [float(g) for g in gaps], K, r2)
