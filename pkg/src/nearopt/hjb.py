"""Monotone finite-difference solvers for the four HJB equations.

Discretisation: centred second differences for the diffusion (Kushner
splitting for cross terms), first-order upwind differences for the drift, and
the pointwise minimum over ``U`` replaced by a minimum over a finite control
lattice. On the edge of a truncated whole-space box the diffusion reflects
(ghost node mirrored) and outward drift is dropped, which keeps the scheme
monotone; accuracy checks should use the inner part of the box.

Writing ``H_k V = L_k V + c_k`` for control sample ``k``, the solvers are

* discounted: Jacobi sweeps ``V <- (V + dt_i min_k H_k V) / (1 + alpha dt_i)``
  with ``dt_i = 1 / max_k Q_ik`` (``Q`` = total jump rate at node ``i``);
* ergodic: relative value iteration ``V <- V + dt (min_k H_k V - (min_k H_k V)(anchor))``;
* exit: ``phi <- min_k (phi + dt_i H_k phi) / (1 + dt_i delta_k)`` with
  ``phi = c_e`` on the box boundary;
* finite horizon: backward explicit (or semi-implicit) march from ``c_T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import ControlProblem, InvalidInputError
from .grid import Grid, ValueField
from .policy import GridPolicy

CRITERIA = ("finite_horizon", "discounted", "ergodic", "exit")


class SolverError(RuntimeError):
    """Raised when an iteration fails to converge; carries the residual history."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class CFLError(SolverError):
    pass


class NonMonotoneError(ValueError):
    pass


@dataclass
class SolverConfig:
    n_controls: int | tuple = 33
    control_samples: np.ndarray | None = None
    tolerance: float = 1e-8
    max_iters: int = 2_000_000
    time_step: float | None = None
    scheme: str = "explicit"  # finite horizon: "explicit" or "semi-implicit"
    n_save: int = 101  # stored time slices for finite-horizon fields
    cfl_safety: float = 0.9
    relaxation: float = 0.5  # ergodic: dt = relaxation / max rate
    anchor: tuple | None = None
    spacing: float | tuple = 0.01  # exit problems solved without an explicit grid
    defect_refine: int = 8

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InvalidInputError("tolerance must be positive")
        if self.scheme not in ("explicit", "semi-implicit"):
            raise InvalidInputError("scheme must be 'explicit' or 'semi-implicit'")
        if not 0 < self.relaxation <= 1:
            raise InvalidInputError("relaxation must lie in (0, 1]")

    def samples(self, problem: ControlProblem) -> np.ndarray:
        if self.control_samples is not None:
            s = np.asarray(self.control_samples, dtype=float).reshape(-1, problem.dim_u)
            if not np.all(problem.control_set.contains(s)):
                raise InvalidInputError("control samples must lie in the control set")
        else:
            s = problem.control_set.lattice(self.n_controls)
        order = np.lexsort(s.T[::-1])
        return np.unique(s[order], axis=0)


@dataclass
class ErgodicSolution:
    V: ValueField
    rho: float


# --------------------------------------------------------------------------
# stencil assembly

@dataclass
class _Stencil:
    grid: Grid
    nbr: np.ndarray    # (O, N) neighbour flat index (self where absent)
    coef: np.ndarray   # (K, O, N) nonnegative jump rates
    cost: np.ndarray   # (K, N)
    rate: np.ndarray   # (K, N) total rate

    def hamiltonian(self, V: np.ndarray) -> np.ndarray:
        """``L_k V + c_k`` for every control sample, shape (K, N)."""
        H = self.cost.copy()
        for o in range(self.nbr.shape[0]):
            H += self.coef[:, o, :] * (V[self.nbr[o]] - V)
        return H

    def matrix(self, k_of_node: np.ndarray | None = None) -> sp.csr_matrix:
        """Generator matrix for the per-node control choice ``k_of_node``."""
        N = self.nbr.shape[1]
        ii = np.arange(N)
        if k_of_node is None:
            k_of_node = np.zeros(N, dtype=int)
        rows, cols, vals = [ii], [ii], [-self.rate[k_of_node, ii]]
        for o in range(self.nbr.shape[0]):
            rows.append(ii)
            cols.append(self.nbr[o])
            vals.append(self.coef[k_of_node, o, ii])
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))


def _assemble(problem: ControlProblem, grid: Grid, U: np.ndarray) -> _Stencil:
    """Upwind/centred jump rates. ``U`` is (K, m) samples or (K, N, m) per-node controls."""
    if grid.has_time:
        raise InvalidInputError("stencils are built on space grids")
    d, N = grid.ndim, grid.size
    if d != problem.dim_x:
        raise InvalidInputError("grid dimension does not match the problem")
    P = grid.points
    U = np.asarray(U, dtype=float)
    if U.ndim == 2:
        U = np.broadcast_to(U[:, None, :], (U.shape[0], N, U.shape[1]))
    K = U.shape[0]
    X = np.broadcast_to(P[None], (K, N, d))
    b = np.asarray(problem.drift(X, U), dtype=float).reshape(K, N, d)
    cost = np.asarray(problem.running_cost(X, U), dtype=float).reshape(K, N)
    a = problem.diffusion_matrix(P).reshape(N, d, d)
    if np.max(np.abs(a - np.swapaxes(a, 1, 2)), initial=0.0) > 1e-12:
        raise InvalidInputError("diffusion matrix a(x) is not symmetric")
    h = grid.spacing
    shape = np.array(grid.shape)
    multi = np.stack(np.unravel_index(np.arange(N), grid.shape), axis=1)  # (N, d)
    on_bnd = grid.boundary_mask().ravel()

    offsets, coefs = [], []

    def neighbour(off):
        tgt = multi + np.array(off)
        ok = np.all((tgt >= 0) & (tgt < shape), axis=1)
        idx = np.where(ok, np.ravel_multi_index(np.clip(tgt, 0, shape - 1).T, grid.shape), np.arange(N))
        return idx, ok

    live = [k for k in range(d) if grid.shape[k] > 1]
    for k in live:
        cross = np.zeros(N)
        for l in live:
            if l != k:
                cross += np.abs(a[:, k, l]) / (h[k] * h[l])
        cross = np.where(on_bnd, 0.0, cross)
        D = a[:, k, k] / h[k] ** 2 - cross
        bad = (D < -1e-12 * np.maximum(1.0, a[:, k, k] / h[k] ** 2))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise NonMonotoneError(
                f"non-monotone diffusion stencil at node {P[i].tolist()} (axis {k}): "
                f"a_kk/h^2 = {a[i, k, k] / h[k] ** 2:.4g} < sum |a_kl|/(h_k h_l) = {cross[i]:.4g}")
        D = np.maximum(D, 0.0)
        bp = np.maximum(b[:, :, k], 0.0) / h[k]
        bm = np.maximum(-b[:, :, k], 0.0) / h[k]
        low = multi[:, k] == 0
        high = multi[:, k] == shape[k] - 1
        plus = np.where(low, 2 * D, np.where(high, 0.0, D)) + np.where(high, 0.0, bp)
        minus = np.where(high, 2 * D, np.where(low, 0.0, D)) + np.where(low, 0.0, bm)
        e = [0] * d
        e[k] = 1
        offsets.append(tuple(e))
        coefs.append(plus)
        e[k] = -1
        offsets.append(tuple(e))
        coefs.append(minus)
    for ki, k in enumerate(live):
        for l in live[ki + 1:]:
            akl = np.where(on_bnd, 0.0, a[:, k, l]) / (h[k] * h[l])
            if not np.any(akl):
                continue
            pos = np.broadcast_to(np.maximum(akl, 0.0), (K, N))
            neg = np.broadcast_to(np.maximum(-akl, 0.0), (K, N))
            for sk, sl, w in ((1, 1, pos), (-1, -1, pos), (1, -1, neg), (-1, 1, neg)):
                e = [0] * d
                e[k], e[l] = sk, sl
                offsets.append(tuple(e))
                coefs.append(w)
    O = len(offsets)
    nbr = np.empty((O, N), dtype=np.int64)
    coef = np.zeros((K, O, N))
    for o, (off, c) in enumerate(zip(offsets, coefs)):
        idx, ok = neighbour(off)
        nbr[o] = idx
        coef[:, o, :] = np.where(ok, np.broadcast_to(c, (K, N)), 0.0)
    if O == 0:
        nbr = np.zeros((0, N), dtype=np.int64)
    return _Stencil(grid, nbr, coef, cost, coef.sum(axis=1))


def _node_controls(policy, grid: Grid, problem: ControlProblem, t: float | None = None) -> np.ndarray:
    """Controls of ``policy`` at the nodes of a space grid, shape (N, m)."""
    if isinstance(policy, GridPolicy):
        if not policy.has_time and policy.grid == grid:
            return np.asarray(policy.flat_values)
        if policy.has_time:
            if policy.grid.space_grid() == grid and t is not None:
                tn = policy.grid.axes[0]
                j = int(np.argmin(np.abs(tn - t)))
                if abs(tn[j] - t) <= 1e-9 * max(1.0, tn[-1]):
                    return np.asarray(policy.values[j]).reshape(-1, problem.dim_u)
            pts = np.concatenate([np.full((grid.size, 1), 0.0 if t is None else t), grid.points], axis=1)
            return policy(pts)
        return policy(grid.points)
    if callable(policy):
        return problem.control_set.project(np.asarray(policy(grid.points), dtype=float).reshape(grid.size, -1))
    u = problem.control_set.project(np.atleast_1d(np.asarray(policy, dtype=float)))
    return np.broadcast_to(u, (grid.size, problem.dim_u))


def _anchor(grid: Grid, cfg: SolverConfig) -> int:
    idx = cfg.anchor if cfg.anchor is not None else grid.nearest_origin_index()
    return int(np.ravel_multi_index(tuple(idx), grid.shape))


def _stop_bound(update: float, beta: float) -> float:
    return update * beta / (1.0 - beta) if beta < 1 else math.inf


# --------------------------------------------------------------------------
# Bellman operators (exposed for property tests)

def bellman_operator(problem: ControlProblem, grid: Grid, cfg: SolverConfig, criterion: str = "discounted"):
    """Return the one-sweep map ``T`` used by the stationary solvers."""
    samples = cfg.samples(problem)
    st = _assemble(problem, grid, samples)
    if criterion == "discounted":
        alpha = problem.discount
        qmax = st.rate.max(axis=0)
        dt = np.where(qmax > 0, 1.0 / np.where(qmax > 0, qmax, 1.0), 1.0)

        def T(V):
            return (V + dt * st.hamiltonian(V).min(axis=0)) / (1.0 + alpha * dt)
        return T
    if criterion == "exit":
        bnd = grid.boundary_mask().ravel()
        delta = _exit_discounts(problem, grid, samples)
        qmax = st.rate.max(axis=0)
        dt = np.where(qmax > 0, 1.0 / np.where(qmax > 0, qmax, 1.0), 1.0)

        def T(V):
            out = ((V + dt * st.hamiltonian(V)) / (1.0 + dt * delta)).min(axis=0)
            return np.where(bnd, V, out)
        return T
    if criterion == "ergodic":
        dt = cfg.relaxation / max(st.rate.max(), 1e-300)
        a = _anchor(grid, cfg)

        def T(V):
            Hm = st.hamiltonian(V).min(axis=0)
            return V + dt * (Hm - Hm[a])
        return T
    raise InvalidInputError(f"no stationary Bellman map for criterion {criterion!r}")


def _exit_discounts(problem, grid, samples):
    K, N = len(samples), grid.size
    X = np.broadcast_to(grid.points[None], (K, N, grid.ndim))
    U = np.broadcast_to(samples[:, None, :], (K, N, samples.shape[1]))
    delta = np.asarray(problem.exit_discount(X, U), dtype=float) * np.ones((K, N))
    if np.any(delta < 0):
        raise InvalidInputError("exit discount must be nonnegative")
    return delta


# --------------------------------------------------------------------------
# solvers

def solve_discounted(problem: ControlProblem, grid: Grid, cfg: SolverConfig | None = None) -> ValueField:
    cfg = cfg or SolverConfig()
    alpha = problem.discount
    if alpha is None or alpha <= 0:
        raise InvalidInputError("discounted problem needs discount > 0")
    samples = cfg.samples(problem)
    st = _assemble(problem, grid, samples)
    qmax = st.rate.max(axis=0)
    dt = np.where(qmax > 0, 1.0 / np.where(qmax > 0, qmax, 1.0), 1.0)
    beta = float(np.max(1.0 / (1.0 + alpha * dt)))
    V = np.zeros(grid.size)
    history = []
    for it in range(cfg.max_iters):
        Vn = (V + dt * st.hamiltonian(V).min(axis=0)) / (1.0 + alpha * dt)
        upd = float(np.max(np.abs(Vn - V)))
        history.append(upd)
        V = Vn
        if _stop_bound(upd, beta) <= cfg.tolerance:
            break
    else:
        raise SolverError(f"discounted value iteration did not converge in {cfg.max_iters} sweeps", history)
    info = {"iterations": it + 1, "contraction": beta, "dt_eff": float(dt.min()),
            "samples": samples, "criterion": "discounted"}
    info["lattice_defect"] = _defect(problem, grid, cfg, samples, st, V)
    return ValueField(grid, V.reshape(grid.shape), "reflecting", None, history, info)


def _defect(problem, grid, cfg, samples, st, V, extra=None) -> float:
    if cfg.defect_refine <= 1 or cfg.control_samples is not None:
        return 0.0
    n = np.broadcast_to(np.atleast_1d(cfg.n_controls), (problem.dim_u,))
    fine_n = [int((k - 1) * cfg.defect_refine + 1) if k > 1 else 1 for k in n]
    if np.prod(fine_n) > 20000:
        return float("nan")
    fine = problem.control_set.lattice(fine_n)
    fst = _assemble(problem, grid, fine)
    Hc = st.hamiltonian(V)
    Hf = fst.hamiltonian(V)
    if extra is not None:
        Hc = Hc - extra(samples) * V
        Hf = Hf - extra(fine) * V
    gap = Hc.min(axis=0) - Hf.min(axis=0)
    if extra is not None:
        gap = np.where(grid.boundary_mask().ravel(), 0.0, gap)
    return float(max(0.0, gap.max()))


def solve_ergodic(problem: ControlProblem, grid: Grid, cfg: SolverConfig | None = None) -> ErgodicSolution:
    """Relative value iteration normalised at the anchor node (default: nearest the origin)."""
    cfg = cfg or SolverConfig()
    samples = cfg.samples(problem)
    st = _assemble(problem, grid, samples)
    dt = cfg.relaxation / max(float(st.rate.max()), 1e-300)
    a = _anchor(grid, cfg)
    V = np.zeros(grid.size)
    history = []
    rho = math.nan
    for it in range(cfg.max_iters):
        Hm = st.hamiltonian(V).min(axis=0)
        rho = float(Hm[a])
        res = float(np.max(np.abs(Hm - rho)))
        history.append(res)
        if res <= cfg.tolerance:
            break
        V = V + dt * (Hm - rho)
    else:
        raise SolverError(f"relative value iteration did not converge in {cfg.max_iters} sweeps", history)
    info = {"iterations": it + 1, "dt_eff": dt, "anchor": a, "samples": samples, "criterion": "ergodic",
            "rho": rho}
    info["lattice_defect"] = _defect(problem, grid, cfg, samples, st, V)
    return ErgodicSolution(ValueField(grid, V.reshape(grid.shape), "reflecting", None, history, info), rho)


def exit_grid(problem: ControlProblem, spacing) -> Grid:
    lo, hi = problem.exit_domain
    return Grid.from_spacing(lo, hi, spacing)


def solve_exit(problem: ControlProblem, cfg: SolverConfig | None = None, grid: Grid | None = None) -> ValueField:
    """Dirichlet problem on the closed box ``O`` with ``phi = c_e`` on its boundary."""
    cfg = cfg or SolverConfig()
    if problem.exit_domain is None or problem.exit_discount is None or problem.exit_terminal is None:
        raise InvalidInputError("exit problem needs exit_domain, exit_discount and exit_terminal")
    grid = grid or exit_grid(problem, cfg.spacing)
    samples = cfg.samples(problem)
    st = _assemble(problem, grid, samples)
    delta = _exit_discounts(problem, grid, samples)
    bnd = grid.boundary_mask().ravel()
    qmax = st.rate.max(axis=0)
    dt = np.where(qmax > 0, 1.0 / np.where(qmax > 0, qmax, 1.0), 1.0)
    dmin = float(delta[:, ~bnd].min()) if (~bnd).any() else 0.0
    beta_theory = float(np.max(1.0 / (1.0 + dmin * dt[~bnd]))) if (~bnd).any() else 0.0
    V = np.zeros(grid.size)
    V[bnd] = np.asarray(problem.exit_terminal(grid.points[bnd]), dtype=float)
    history = []
    lag = 50
    for it in range(cfg.max_iters):
        Vn = ((V + dt * st.hamiltonian(V)) / (1.0 + dt * delta)).min(axis=0)
        Vn = np.where(bnd, V, Vn)
        upd = float(np.max(np.abs(Vn - V)))
        history.append(upd)
        V = Vn
        if upd == 0.0:
            break
        beta = beta_theory
        if beta >= 1.0 and len(history) > lag and history[-1 - lag] > 0:
            beta = min((upd / history[-1 - lag]) ** (1.0 / lag), 1.0)
        if _stop_bound(upd, beta) <= cfg.tolerance:
            break
    else:
        raise SolverError(f"exit-problem iteration did not converge in {cfg.max_iters} sweeps", history)
    info = {"iterations": it + 1, "dt_eff": float(dt.min()), "samples": samples, "criterion": "exit"}

    def dfun(s):
        return _exit_discounts(problem, grid, s)
    info["lattice_defect"] = _defect(problem, grid, cfg, samples, st, V, extra=dfun)
    return ValueField(grid, V.reshape(grid.shape), "dirichlet", None, history, info)


def _time_steps(problem: ControlProblem, cfg: SolverConfig, max_rate: float) -> tuple[int, float, int]:
    T = problem.horizon
    stride_target = max(cfg.n_save - 1, 1)
    if cfg.time_step is None:
        if cfg.scheme == "explicit":
            dt_max = cfg.cfl_safety / max(max_rate, 1e-300)
        else:
            dt_max = T / stride_target
        n = max(1, math.ceil(T / dt_max))
        n = stride_target * math.ceil(n / stride_target)
    else:
        n = max(1, int(round(T / cfg.time_step)))
    dt = T / n
    if cfg.scheme == "explicit" and dt * max_rate > 1.0 + 1e-12:
        raise CFLError(
            f"explicit step dt={dt:.4g} violates the monotonicity bound dt <= 1/max rate = {1.0 / max_rate:.4g}")
    stride = n // stride_target if n % stride_target == 0 and n >= stride_target else 1
    return n, dt, stride


def solve_finite_horizon(problem: ControlProblem, grid: Grid, cfg: SolverConfig | None = None) -> ValueField:
    """Backward march of ``psi_t + min_k H_k psi = 0`` from ``psi(T) = c_T``.

    Returns a field on the time x space grid (time axis first) with
    ``cfg.n_save`` stored slices when the step count allows it.
    """
    cfg = cfg or SolverConfig()
    if problem.horizon is None or problem.terminal_cost is None:
        raise InvalidInputError("finite-horizon problem needs horizon and terminal_cost")
    samples = cfg.samples(problem)
    st = _assemble(problem, grid, samples)
    n, dt, stride = _time_steps(problem, cfg, float(st.rate.max()))
    psi = np.asarray(problem.terminal_cost(grid.points), dtype=float) * np.ones(grid.size)
    n_slices = n // stride + 1
    store = np.empty((n_slices, grid.size))
    ahead = np.empty((n_slices, grid.size))
    store[-1] = psi
    ahead[-1] = psi
    ident = sp.identity(grid.size, format="csr")
    for step in range(n - 1, -1, -1):
        H = st.hamiltonian(psi)
        if cfg.scheme == "explicit":
            new = psi + dt * H.min(axis=0)
        else:
            k = H.argmin(axis=0)
            A = ident - dt * st.matrix(k)
            new = spla.spsolve(A.tocsc(), psi + dt * st.cost[k, np.arange(grid.size)])
        if step % stride == 0:
            store[step // stride] = new
            ahead[step // stride] = psi
        psi = new
    tgrid = grid.with_time(problem.horizon, n_slices)
    info = {"time_steps": n, "dt": dt, "stride": stride, "samples": samples, "criterion": "finite_horizon"}
    info["lattice_defect"] = _defect(problem, grid, cfg, samples, st, store[0])
    return ValueField(tgrid, store.reshape(tgrid.shape), "terminal",
                      ahead.reshape(tgrid.shape), [], info)


# --------------------------------------------------------------------------
# selectors and policy evaluation

TIE_RTOL = 1e-10


def _argmin_ties(H: np.ndarray) -> np.ndarray:
    """First (lexicographically smallest) sample within a relative round-off band of the minimum."""
    hmin = H.min(axis=0)
    band = TIE_RTOL * (1.0 + np.abs(hmin))
    return np.argmax(H <= hmin + band, axis=0)


def extract_selector(problem: ControlProblem, value: ValueField, cfg: SolverConfig | None = None) -> GridPolicy:
    """Per-node argmin of the discrete Hamiltonian over the control lattice.

    Values within a relative ``TIE_RTOL`` of the minimum count as ties, and
    ties go to the lexicographically smallest control. The result uses
    nearest-node interpolation.
    """
    cfg = cfg or SolverConfig()
    samples = cfg.samples(problem)
    grid = value.grid
    if grid.has_time:
        sg = grid.space_grid()
        st = _assemble(problem, sg, samples)
        src = value.lookahead if value.lookahead is not None else value.values
        out = np.empty(grid.shape + (problem.dim_u,))
        for j in range(grid.shape[0]):
            k = _argmin_ties(st.hamiltonian(src[j].ravel()))
            out[j] = samples[k].reshape(sg.shape + (problem.dim_u,))
        return GridPolicy(grid, out, problem.control_set, "nearest")
    st = _assemble(problem, grid, samples)
    V = value.values.ravel()
    H = st.hamiltonian(V)
    if value.boundary_kind == "dirichlet":
        H = H - _exit_discounts(problem, grid, samples) * V
    k = _argmin_ties(H)
    return GridPolicy(grid, samples[k].reshape(grid.shape + (problem.dim_u,)), problem.control_set, "nearest")


def evaluate_policy_pde(problem: ControlProblem, policy, criterion: str, grid: Grid | None = None,
                        cfg: SolverConfig | None = None):
    """Cost of a fixed policy from the linear version of the criterion's HJB.

    Uses the same spatial discretisation as the matching solver. Returns a
    :class:`ValueField` (an :class:`ErgodicSolution` for ``ergodic``).
    """
    cfg = cfg or SolverConfig()
    if criterion not in CRITERIA:
        raise InvalidInputError(f"criterion must be one of {CRITERIA}")
    if criterion == "exit" and grid is None:
        grid = exit_grid(problem, cfg.spacing)
    if grid is None:
        raise InvalidInputError("a grid is required")
    if grid.has_time:
        grid = grid.space_grid()
    N = grid.size

    if criterion == "finite_horizon":
        if problem.horizon is None or problem.terminal_cost is None:
            raise InvalidInputError("finite-horizon evaluation needs horizon and terminal_cost")
        rate_probe = _assemble(problem, grid, cfg.samples(problem))
        n, dt, stride = _time_steps(problem, cfg, float(rate_probe.rate.max()))
        psi = np.asarray(problem.terminal_cost(grid.points), dtype=float) * np.ones(N)
        n_slices = n // stride + 1
        store = np.empty((n_slices, N))
        store[-1] = psi
        ident = sp.identity(N, format="csr")
        timed = isinstance(policy, GridPolicy) and policy.has_time
        st = None
        for step in range(n - 1, -1, -1):
            if st is None or timed:
                st = _assemble(problem, grid, _node_controls(policy, grid, problem, step * dt)[None])
            if cfg.scheme == "explicit":
                rate_max = float(st.rate.max())
                if dt * rate_max > 1.0 + 1e-12:
                    raise CFLError(f"explicit step dt={dt:.4g} too large for the policy's rates")
                new = psi + dt * st.hamiltonian(psi)[0]
            else:
                new = spla.spsolve((ident - dt * st.matrix()).tocsc(), psi + dt * st.cost[0])
            if step % stride == 0:
                store[step // stride] = new
            psi = new
        tgrid = grid.with_time(problem.horizon, n_slices)
        return ValueField(tgrid, store.reshape(tgrid.shape), "terminal", None, [],
                          {"time_steps": n, "dt": dt, "criterion": criterion})

    u = _node_controls(policy, grid, problem)
    st = _assemble(problem, grid, u[None])
    L = st.matrix()
    c = st.cost[0]
    if criterion == "discounted":
        if problem.discount is None:
            raise InvalidInputError("discounted evaluation needs discount")
        A = problem.discount * sp.identity(N, format="csr") - L
        J = spla.spsolve(A.tocsc(), c)
        return ValueField(grid, J.reshape(grid.shape), "reflecting", None, [], {"criterion": criterion})
    if criterion == "ergodic":
        a = _anchor(grid, cfg)
        col = -np.ones((N, 1))
        row = np.zeros((1, N + 1))
        row[0, a] = 1.0
        A = sp.vstack([sp.hstack([L, sp.csr_matrix(col)]), sp.csr_matrix(row)]).tocsc()
        rhs = np.r_[-c, 0.0]
        with np.errstate(all="ignore"):
            sol = spla.spsolve(A, rhs)
        if not np.all(np.isfinite(sol)):
            raise SolverError("ergodic policy evaluation is singular (policy not unichain on the grid)")
        V, rho = sol[:N], float(sol[N])
        return ErgodicSolution(ValueField(grid, V.reshape(grid.shape), "reflecting", None, [],
                                          {"criterion": criterion, "rho": rho}), rho)
    # exit
    bnd = grid.boundary_mask().ravel()
    delta = np.asarray(problem.exit_discount(grid.points, u), dtype=float) * np.ones(N)
    phi_b = np.asarray(problem.exit_terminal(grid.points[bnd]), dtype=float)
    inner = np.nonzero(~bnd)[0]
    A = (sp.diags(delta) - L).tocsr()
    Aii = A[inner][:, inner]
    rhs = c[inner] - A[inner][:, np.nonzero(bnd)[0]] @ phi_b
    phi = np.empty(N)
    phi[bnd] = phi_b
    phi[inner] = spla.spsolve(Aii.tocsc(), rhs)
    return ValueField(grid, phi.reshape(grid.shape), "dirichlet", None, [], {"criterion": criterion})


def policy_cost(problem: ControlProblem, policy, criterion: str, grid: Grid, x0, cfg: SolverConfig | None = None) -> float:
    """Scalar PDE cost of ``policy`` at the probe point ``x0`` (``rho`` for ergodic)."""
    out = evaluate_policy_pde(problem, policy, criterion, grid, cfg)
    if isinstance(out, ErgodicSolution):
        return out.rho
    if out.grid.has_time:
        sg = out.grid.space_grid()
        return ValueField(sg, out.values[0]).at(x0)
    return out.at(x0)


def residual_csv(history) -> str:
    lines = ["iteration,residual"]
    lines += [f"{i + 1},{float(r)!r}" for i, r in enumerate(history)]
    return "\n".join(lines) + "\n"
