"""Controlled diffusion problems and the standing-assumption checks.

All problem callables are vectorised over leading axes::

    drift(x, u)        x: (..., d), u: (..., m)  ->  (..., d)
    diffusion(x)       x: (..., d)               ->  (..., d, d)
    running_cost(x, u)                           ->  (...)
    terminal_cost(x), exit_terminal(x)           ->  (...)
    exit_discount(x, u)                          ->  (...)

The generator acting on a C^2 function is ``trace(a D^2 f) + b . grad f`` with
``a = sigma sigma^T / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import Grid, ValueField


class InvalidInputError(ValueError):
    pass


class OutOfDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ControlSet:
    """Axis-aligned box ``[lower, upper]`` in R^m."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise InvalidInputError("control bounds differ in length")
        if any(a > b for a, b in zip(lo, hi)):
            raise InvalidInputError(f"control box has lower > upper: {lo} vs {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def project(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), np.array(self.lower), np.array(self.upper))

    def contains(self, u, atol: float = 0.0) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.all((u >= np.array(self.lower) - atol) & (u <= np.array(self.upper) + atol), axis=-1)

    def lattice(self, n: int | Sequence[int]) -> np.ndarray:
        """Uniform lattice with ``n`` points per axis, sorted lexicographically."""
        counts = np.broadcast_to(np.atleast_1d(n), (self.dim,))
        axes = []
        for lo, hi, k in zip(self.lower, self.upper, counts):
            k = int(k)
            if lo == hi or k == 1:
                axes.append(np.array([0.5 * (lo + hi)]))
                continue
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
            j = np.arange(k)
            axes.append(mid + half * ((2 * j - (k - 1)) / (k - 1)))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class ControlProblem:
    """Drift, diffusion and costs of a controlled diffusion plus per-criterion extras."""

    dim_x: int
    control_set: ControlSet
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable | None = None
    horizon: float | None = None
    discount: float | None = None
    exit_domain: tuple | None = None  # (lower, upper) of the box O
    exit_discount: Callable | None = None
    exit_terminal: Callable | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_x < 1:
            raise InvalidInputError("dim_x must be positive")
        if self.horizon is not None and self.horizon <= 0:
            raise InvalidInputError("horizon must be positive")
        if self.discount is not None and self.discount <= 0:
            raise InvalidInputError("discount must be positive")
        if self.exit_domain is not None:
            lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in self.exit_domain)
            if lo.shape != (self.dim_x,) or hi.shape != (self.dim_x,) or np.any(lo >= hi):
                raise InvalidInputError("exit_domain must be a nondegenerate box in R^d")
            self.exit_domain = (lo, hi)

    @property
    def dim_u(self) -> int:
        return self.control_set.dim

    def diffusion_matrix(self, x) -> np.ndarray:
        """``a(x) = sigma(x) sigma(x)^T / 2``."""
        s = np.asarray(self.diffusion(np.asarray(x, dtype=float)), dtype=float)
        return 0.5 * np.einsum("...ik,...jk->...ij", s, s)


@dataclass(frozen=True)
class RelaxedControl:
    """Finite mixture of Dirac masses on the control set."""

    atoms: tuple
    weights: tuple

    def __post_init__(self):
        atoms = [np.atleast_1d(np.asarray(a, dtype=float)) for a in self.atoms]
        w = np.asarray(self.weights, dtype=float)
        if len(atoms) == 0:
            raise InvalidInputError("relaxed control needs at least one atom")
        if len(atoms) != len(w):
            raise InvalidInputError("atoms and weights differ in length")
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError("weights must lie in [0, 1] and sum to 1")
        object.__setattr__(self, "atoms", tuple(tuple(a) for a in atoms))
        object.__setattr__(self, "weights", tuple(float(v) for v in w))

    @classmethod
    def dirac(cls, u) -> "RelaxedControl":
        return cls((tuple(np.atleast_1d(u)),), (1.0,))

    def atom_array(self) -> np.ndarray:
        return np.array(self.atoms, dtype=float)

    def check_in(self, control_set: ControlSet) -> None:
        if not np.all(control_set.contains(self.atom_array())):
            raise InvalidInputError("relaxed control has an atom outside the control set")


@dataclass(frozen=True)
class LyapunovCertificate:
    V: Callable
    h: Callable
    C0: float


def relaxed_drift(problem: ControlProblem, x, nu: RelaxedControl) -> np.ndarray:
    """Drift averaged over the atoms of ``nu``."""
    if not nu.atoms:
        raise InvalidInputError("empty atom list")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros(problem.dim_x)
    for atom, w in zip(nu.atom_array(), nu.weights):
        out = out + w * np.asarray(problem.drift(x, atom), dtype=float)
    return out


def relaxed_cost(problem: ControlProblem, x, nu: RelaxedControl) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(sum(w * problem.running_cost(x, a) for a, w in zip(nu.atom_array(), nu.weights)))


def _derivatives(values: np.ndarray, h: np.ndarray, index: tuple) -> tuple[np.ndarray, np.ndarray]:
    d = values.ndim
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    f0 = values[index]
    for k in range(d):
        ep = list(index); ep[k] += 1
        em = list(index); em[k] -= 1
        fp, fm = values[tuple(ep)], values[tuple(em)]
        grad[k] = (fp - fm) / (2 * h[k])
        hess[k, k] = (fp - 2 * f0 + fm) / h[k] ** 2
        for l in range(k + 1, d):
            corner = {}
            for sk in (1, -1):
                for sl in (1, -1):
                    e = list(index); e[k] += sk; e[l] += sl
                    corner[sk, sl] = values[tuple(e)]
            hess[k, l] = hess[l, k] = (
                corner[1, 1] - corner[1, -1] - corner[-1, 1] + corner[-1, -1]
            ) / (4 * h[k] * h[l])
    return grad, hess


def apply_generator(problem: ControlProblem, f_grid: ValueField, zeta, index) -> float:
    """Central-difference ``trace(a D^2 f) + b . grad f`` at an interior node.

    ``index`` is the node's integer index tuple on ``f_grid.grid``.
    """
    grid = f_grid.grid
    if grid.has_time:
        raise InvalidInputError("apply_generator acts on stationary (space-only) fields")
    index = tuple(int(i) for i in np.atleast_1d(index))
    if len(index) != grid.ndim or not grid.is_interior(index):
        raise OutOfDomainError(f"node {index} is not an interior grid point")
    x = grid.points[np.ravel_multi_index(index, grid.shape)]
    grad, hess = _derivatives(f_grid.values, grid.spacing, index)
    a = problem.diffusion_matrix(x)
    b = np.asarray(problem.drift(x, np.atleast_1d(np.asarray(zeta, dtype=float))), dtype=float)
    return float(np.sum(a * hess) + b @ grad)


def generator_field(problem: ControlProblem, f_grid: ValueField, zeta) -> np.ndarray:
    """``apply_generator`` at every interior node at once (NaN on the boundary)."""
    grid = f_grid.grid
    v = f_grid.values
    h = grid.spacing
    d = grid.ndim
    inner = tuple(slice(1, -1) for _ in range(d))

    def shifted(offset):
        return v[tuple(slice(1 + o, n - 1 + o) for o, n in zip(offset, grid.shape))]

    pts = grid.points.reshape(grid.shape + (d,))[inner]
    u = np.broadcast_to(np.atleast_1d(np.asarray(zeta, dtype=float)), pts.shape[:-1] + (problem.dim_u,))
    a = problem.diffusion_matrix(pts)
    b = np.asarray(problem.drift(pts, u), dtype=float)
    out = np.zeros(pts.shape[:-1])
    f0 = v[inner]
    for k in range(d):
        e = [0] * d
        e[k] = 1
        fp = shifted(e)
        e[k] = -1
        fm = shifted(e)
        out += b[..., k] * (fp - fm) / (2 * h[k])
        out += a[..., k, k] * (fp - 2 * f0 + fm) / h[k] ** 2
        for l in range(k + 1, d):
            def c(sk, sl):
                e = [0] * d
                e[k], e[l] = sk, sl
                return shifted(e)
            mixed = (c(1, 1) - c(1, -1) - c(-1, 1) + c(-1, -1)) / (4 * h[k] * h[l])
            out += 2 * a[..., k, l] * mixed
    full = np.full(grid.shape, np.nan)
    full[inner] = out
    return full


# --------------------------------------------------------------------------
# assumption checks

@dataclass
class AssumptionCheck:
    status: str  # "pass" | "fail" | "warn" | "not_checked"
    value: float | None = None
    witness: dict = field(default_factory=dict)
    detail: str = ""


@dataclass
class AssumptionReport:
    checks: dict

    def __getitem__(self, key) -> AssumptionCheck:
        return self.checks[key]

    def ok(self, required: Sequence[str] = ("A1", "A2", "A3")) -> bool:
        return all(self.checks[k].status in ("pass", "warn") for k in required)

    def summary(self) -> str:
        lines = []
        for key, c in self.checks.items():
            val = "" if c.value is None else f"{c.value:.6g}"
            lines.append(f"{key:4s} {c.status:12s} {val:>14s}  {c.detail}")
        return "\n".join(lines)


GROWTH_WARN = 1e3


def check_assumptions(
    problem: ControlProblem,
    grid: Grid,
    control_samples,
    rho_candidate: float | None = None,
    certificate: LyapunovCertificate | None = None,
    n_balls: int = 4,
) -> AssumptionReport:
    """Sampled evidence for the Lipschitz, growth, nondegeneracy, near-monotone
    and Lyapunov hypotheses on a finite grid and control sample.

    The near-monotone check needs ``rho_candidate`` and the Lyapunov check needs
    ``certificate``; without them those entries are ``not_checked``.
    """
    U = np.atleast_2d(np.asarray(control_samples, dtype=float))
    if U.shape[1] != problem.dim_u:
        U = U.reshape(-1, problem.dim_u)
    pts = grid.points
    n, d = pts.shape
    K = len(U)
    X = np.repeat(pts[None, :, :], K, axis=0)           # (K, n, d)
    UU = np.repeat(U[:, None, :], n, axis=1)            # (K, n, m)
    B = np.asarray(problem.drift(X, UU), dtype=float)   # (K, n, d)
    S = np.asarray(problem.diffusion(pts), dtype=float)  # (n, d, d)
    checks = {}

    # local Lipschitz ratios over nested balls, adjacent node pairs only
    radius = np.linalg.norm(pts, axis=1)
    rmax = radius.max() if radius.max() > 0 else 1.0
    radii = [rmax * (k + 1) / n_balls for k in range(n_balls)]
    flat = np.arange(n).reshape(grid.shape)
    ratios = {}
    best = (0.0, None)
    for R in radii:
        worst = 0.0
        for ax in range(d):
            if grid.shape[ax] < 2:
                continue
            i0 = np.take(flat, np.arange(grid.shape[ax] - 1), axis=ax).ravel()
            i1 = np.take(flat, np.arange(1, grid.shape[ax]), axis=ax).ravel()
            keep = (radius[i0] <= R + 1e-12) & (radius[i1] <= R + 1e-12)
            if not np.any(keep):
                continue
            i0, i1 = i0[keep], i1[keep]
            dx2 = np.sum((pts[i1] - pts[i0]) ** 2, axis=1)
            db2 = np.max(np.sum((B[:, i1] - B[:, i0]) ** 2, axis=-1), axis=0)
            ds2 = np.sum((S[i1] - S[i0]) ** 2, axis=(-2, -1))
            r = np.sqrt((db2 + ds2) / dx2)
            j = int(np.argmax(r))
            if r[j] > worst:
                worst = float(r[j])
                if worst > best[0]:
                    best = (worst, (pts[i0[j]].tolist(), pts[i1[j]].tolist()))
        ratios[f"{R:.6g}"] = worst
    finite = all(np.isfinite(v) for v in ratios.values())
    checks["A1"] = AssumptionCheck(
        "pass" if finite else "fail", max(ratios.values()) if ratios else 0.0,
        {"ratio_per_ball": ratios, "worst_pair": best[1]},
        "local Lipschitz ratio sqrt(|db|^2+|dsigma|^2)/|dx| per ball",
    )

    # affine growth
    inner = np.einsum("knd,nd->kn", B, pts)
    sig2 = np.sum(S ** 2, axis=(-2, -1))
    growth = (np.max(np.maximum(inner, 0.0), axis=0) + sig2) / (1.0 + np.sum(pts ** 2, axis=1))
    j = int(np.argmax(growth))
    g = float(growth[j])
    status = "fail" if not np.isfinite(g) else ("warn" if g > GROWTH_WARN else "pass")
    checks["A2"] = AssumptionCheck(
        status, g, {"x": pts[j].tolist()},
        "max (<b,x>^+ + |sigma|^2)/(1+|x|^2); warn above %g" % GROWTH_WARN,
    )

    # nondegeneracy
    a = 0.5 * np.einsum("nik,njk->nij", S, S)
    eig = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))[:, 0]
    j = int(np.argmin(eig))
    sym = float(np.max(np.abs(a - np.swapaxes(a, -1, -2)))) if n else 0.0
    checks["A3"] = AssumptionCheck(
        "pass" if eig[j] > 0 and sym <= 1e-12 else "fail", float(eig[j]),
        {"x": pts[j].tolist(), "asymmetry": sym},
        "min eigenvalue of a(x) = sigma sigma^T / 2 over the grid",
    )

    # near-monotone: min over controls of c on the outer shell
    shell = grid.boundary_mask().ravel()
    if rho_candidate is None:
        checks["A4"] = AssumptionCheck("not_checked", None, {}, "no rho candidate supplied")
    else:
        C = np.asarray(problem.running_cost(X[:, shell], UU[:, shell]), dtype=float)
        cmin = C.min(axis=0)
        j = int(np.argmin(cmin))
        m = float(cmin[j])
        checks["A4"] = AssumptionCheck(
            "pass" if m > rho_candidate else "fail", m,
            {"x": pts[shell][j].tolist(), "rho_candidate": float(rho_candidate)},
            "min over U of c on the outermost grid shell vs rho candidate",
        )

    if certificate is None:
        checks["A5"] = AssumptionCheck("not_checked", None, {}, "no Lyapunov certificate supplied")
    else:
        Vf = ValueField(grid, np.asarray(certificate.V(pts), dtype=float).reshape(grid.shape))
        interior = ~grid.boundary_mask()
        worst, wit = -np.inf, {}
        for k in range(K):
            LV = generator_field(problem, Vf, U[k])[interior]
            hv = np.asarray(certificate.h(pts[interior.ravel()], np.broadcast_to(U[k], (int(interior.sum()), problem.dim_u))), dtype=float)
            excess = LV + hv - certificate.C0
            j = int(np.argmax(excess))
            if excess[j] > worst:
                worst = float(excess[j])
                wit = {"x": pts[interior.ravel()][j].tolist(), "u": U[k].tolist()}
        hmin = float(np.min(certificate.h(X.reshape(-1, d), UU.reshape(-1, problem.dim_u))))
        vmin = float(np.min(Vf.values))
        wit.update({"min_V": vmin, "min_h": hmin})
        ok = worst <= 0 and vmin > 1 and hmin > 0
        checks["A5"] = AssumptionCheck(
            "pass" if ok else "fail", worst, wit,
            "max over interior nodes and controls of L V + h - C0 (needs V > 1, h > 0)",
        )
    return AssumptionReport(checks)
