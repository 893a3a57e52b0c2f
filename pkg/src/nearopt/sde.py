"""Euler-Maruyama simulation of the controlled SDE and Monte Carlo cost estimators.

Every Gaussian increment is drawn from a counter-based stream keyed by
``(seed, path, step)``, so results do not depend on how paths are split
across workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .dynamics import ControlProblem, InvalidInputError, RelaxedControl
from .policy import GridPolicy

_NORMAL_STREAM = 0
_BRIDGE_STREAM = 1
_MIXTURE_STREAM = 2


@dataclass(frozen=True)
class SimConfig:
    dt: float
    horizon: float
    paths: int = 1000
    seed: int = 0
    antithetic: bool = False
    blowup: float = 1e6
    burn_in: float = 0.2
    exit_correction: str = "bridge"  # "bridge" or "linear"
    tail_tolerance: float | None = None
    cost_bound: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")
        if not self.horizon > 0:
            raise InvalidInputError("horizon must be positive")
        if self.paths < 1:
            raise InvalidInputError("need at least one path")
        if self.antithetic and self.paths % 2:
            raise InvalidInputError("antithetic sampling needs an even path count")
        if not 0 <= self.burn_in < 1:
            raise InvalidInputError("burn_in must lie in [0, 1)")
        if self.exit_correction not in ("bridge", "linear"):
            raise InvalidInputError("exit_correction must be 'bridge' or 'linear'")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    exit_time: float | None = None
    diverged: bool = False

    def to_csv(self, path) -> None:
        d, m = self.states.shape[1], self.controls.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + [f"u{i + 1}" for i in range(m)])
            for t, x, u in zip(self.times, self.states, self.controls):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])


@dataclass
class CostEstimate:
    mean: float
    std_error: float
    paths: int
    seed: int
    diverged: int = 0
    flags: tuple = ()
    tail_bound: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def reliable(self) -> bool:
        return not self.flags


def _controller(problem: ControlProblem, policy):
    """Return ``u(t, X, ids, step)`` for the supported policy kinds."""
    m = problem.dim_u
    if isinstance(policy, GridPolicy):
        if policy.has_time:
            def u(t, X, ids, k, seed):
                return policy(np.concatenate([np.full((len(X), 1), t), X], axis=1))
        else:
            def u(t, X, ids, k, seed):
                return policy(X)
        return u
    if isinstance(policy, RelaxedControl):
        policy.check_in(problem.control_set)
        atoms = policy.atom_array()
        cum = np.cumsum(policy.weights)
        cum[-1] = 1.0

        def u(t, X, ids, k, seed):
            r = rng.uniforms(seed, ids, k, 1, _MIXTURE_STREAM)[:, 0]
            return atoms[np.searchsorted(cum, r, side="right").clip(0, len(atoms) - 1)]
        return u
    if callable(policy):
        def u(t, X, ids, k, seed):
            return problem.control_set.project(np.asarray(policy(X), dtype=float).reshape(len(X), m))
        return u
    const = problem.control_set.project(np.atleast_1d(np.asarray(policy, dtype=float)))

    def u(t, X, ids, k, seed):
        return np.broadcast_to(const, (len(X), m))
    return u


@dataclass
class _Step:
    k: int
    t: float
    idx: np.ndarray  # positions (within the batch) of the paths alive at this step
    X: np.ndarray
    U: np.ndarray
    frac: np.ndarray  # fraction of the step spent inside the domain


class _Marcher:
    """Euler-Maruyama march over a batch of path ids with optional box exit.

    Only live paths are advanced; each yielded step carries their positions.
    """

    def __init__(self, problem, policy, x0, cfg: SimConfig, path_ids, domain=None):
        self.problem = problem
        self.cfg = cfg
        self.ids = np.asarray(path_ids, dtype=np.int64)
        self.base = self.ids // 2 if cfg.antithetic else self.ids
        self.sign = np.where(self.ids % 2 == 1, -1.0, 1.0) if cfg.antithetic else np.ones(len(self.ids))
        n, d = len(self.ids), problem.dim_x
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if x0.shape != (d,):
            raise InvalidInputError(f"x0 must have shape ({d},)")
        self.X = np.tile(x0, (n, 1))
        self.control = _controller(problem, policy)
        self.domain = None if domain is None else tuple(np.asarray(v, dtype=float) for v in domain)
        if self.domain is not None:
            lo, hi = self.domain
            if np.any(x0 <= lo) or np.any(x0 >= hi):
                raise InvalidInputError("x0 must lie inside the exit domain")
        self.live = np.arange(n)
        self.exited = np.zeros(n, dtype=bool)
        self.diverged = np.zeros(n, dtype=bool)
        self.exit_time = np.full(n, np.nan)
        self.exit_state = np.full((n, d), np.nan)

    def _bridge(self, X, Xn, S, base, k):
        """Brownian-bridge exit test for paths whose endpoints both lie inside."""
        lo, hi = self.domain
        d = X.shape[1]
        var = np.einsum("nij,nij->ni", S, S) * self.cfg.dt
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            p_hi = np.where(var > 0, np.exp(-2 * (hi - X) * (hi - Xn) / var), 0.0)
            p_lo = np.where(var > 0, np.exp(-2 * (X - lo) * (Xn - lo) / var), 0.0)
        survive = np.prod((1 - p_hi) * (1 - p_lo), axis=1)
        r = rng.uniforms(self.cfg.seed, base, k, 1, _BRIDGE_STREAM)[:, 0]
        hit = r < 1 - survive
        # exit placed on the most likely face at mid-step
        face = np.argmax(np.concatenate([p_hi, p_lo], axis=1), axis=1)
        where = 0.5 * (X + Xn)
        rows = np.arange(len(X))
        ax = face % d
        where[rows, ax] = np.where(face < d, hi[ax], lo[ax])
        return hit, where

    def steps(self, n_steps: int):
        cfg, prob = self.cfg, self.problem
        dt, sq = cfg.dt, math.sqrt(cfg.dt)
        d = prob.dim_x
        for k in range(n_steps):
            live = self.live
            if len(live) == 0:
                return
            t = k * dt
            X = self.X[live]
            U = np.asarray(self.control(t, X, self.ids[live], k, cfg.seed), dtype=float)
            b = np.asarray(prob.drift(X, U), dtype=float)
            S = np.asarray(prob.diffusion(X), dtype=float).reshape(len(X), d, d)
            base = self.base[live]
            Z = rng.normals(cfg.seed, base, k, d, _NORMAL_STREAM) * self.sign[live][:, None]
            noise = np.zeros_like(X)
            for j in range(d):
                noise += S[:, :, j] * Z[:, j:j + 1]
            Xn = X + b * dt + sq * noise
            theta = np.ones(len(X))
            exiting = np.zeros(len(X), dtype=bool)
            estate = Xn
            if self.domain is not None:
                lo, hi = self.domain
                with np.errstate(divide="ignore", invalid="ignore"):
                    dx = Xn - X
                    th_hi = np.where(Xn >= hi, (hi - X) / dx, np.inf)
                    th_lo = np.where(Xn <= lo, (lo - X) / dx, np.inf)
                th = np.minimum(th_hi, th_lo).min(axis=1)
                exiting = np.isfinite(th)
                theta = np.where(exiting, np.clip(th, 0.0, 1.0), 1.0)
                estate = X + theta[:, None] * (Xn - X)
                if cfg.exit_correction == "bridge":
                    hit, where = self._bridge(X, Xn, S, base, k)
                    hit &= ~exiting
                    estate = np.where(hit[:, None], where, estate)
                    theta = np.where(hit, 0.5, theta)
                    exiting |= hit
            with np.errstate(invalid="ignore", over="ignore"):
                blow = ~exiting & (~np.all(np.isfinite(Xn), axis=1)
                                   | (np.linalg.norm(np.nan_to_num(Xn, nan=np.inf), axis=1) > cfg.blowup))
            yield _Step(k, t, live, X, U, theta)
            if exiting.any():
                ne = live[exiting]
                self.exit_time[ne] = t + theta[exiting] * dt
                self.exit_state[ne] = estate[exiting]
                self.exited[ne] = True
            self.diverged[live[blow]] = True
            keep = ~exiting & ~blow
            self.X[live[keep]] = Xn[keep]
            self.live = live[keep]


def simulate(problem: ControlProblem, policy, x0, cfg: SimConfig, path: int = 0, domain=None) -> Trajectory:
    """One Euler-Maruyama path (stream index ``path``).

    ``domain`` defaults to the problem's exit box; on exit the trajectory ends
    at the linearly interpolated crossing point and time.
    """
    if domain is None:
        domain = problem.exit_domain
    m = _Marcher(problem, policy, x0, cfg, [path], domain)
    times, states, controls = [], [], []
    last_u = None
    for st in m.steps(cfg.n_steps):
        times.append(st.t)
        states.append(st.X[0].copy())
        controls.append(st.U[0].copy())
        last_u = st.U[0]
    exit_time = None
    if m.exited[0]:
        times.append(float(m.exit_time[0]))
        states.append(m.exit_state[0].copy())
        controls.append(np.asarray(m.control(times[-1], m.exit_state[:1], m.ids, len(times), cfg.seed))[0])
        exit_time = float(m.exit_time[0])
    elif not m.diverged[0]:
        t_end = cfg.n_steps * cfg.dt
        times.append(t_end)
        states.append(m.X[0].copy())
        controls.append(np.asarray(m.control(t_end, m.X[:1], m.ids, cfg.n_steps, cfg.seed))[0]
                        if last_u is not None else np.zeros(problem.dim_u))
    return Trajectory(np.array(times), np.array(states), np.array(controls), exit_time, bool(m.diverged[0]))


def dump_trajectories(problem, policy, x0, cfg: SimConfig, directory, n_paths: int | None = None) -> list[Path]:
    """Write one CSV per path (t, x..., u...) into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for p in range(n_paths if n_paths is not None else cfg.paths):
        f = out / f"path_{p:06d}.csv"
        simulate(problem, policy, x0, cfg, path=p).to_csv(f)
        files.append(f)
    return files


# --------------------------------------------------------------------------
# estimators

def _run(fn, cfg: SimConfig, workers: int):
    ids = np.arange(cfg.paths)
    if workers <= 1:
        parts = [fn(ids)]
    else:
        size = -(-cfg.paths // workers)
        if cfg.antithetic and size % 2:
            size += 1
        chunks = [ids[i:i + size] for i in range(0, cfg.paths, size)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def _summarise(values: np.ndarray, ok: np.ndarray, cfg: SimConfig):
    vals = values[ok]
    if len(vals) == 0:
        return float("nan"), float("nan")
    mean = float(np.mean(vals))
    if cfg.antithetic and ok.all():
        pairs = vals.reshape(-1, 2).mean(axis=1)
        se = float(np.std(pairs, ddof=1) / math.sqrt(len(pairs))) if len(pairs) > 1 else 0.0
    else:
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return mean, se


def _diverged_flags(n_div: int, paths: int) -> list[str]:
    return ["unreliable: %d diverged paths" % n_div] if n_div > 0.01 * paths else []


def estimate_finite_horizon(problem: ControlProblem, policy, x0, cfg: SimConfig, workers: int = 1) -> CostEstimate:
    """``E[int_0^T c dt + c_T(X_T)]`` with a left-endpoint Riemann sum."""
    if problem.horizon is None or problem.terminal_cost is None:
        raise InvalidInputError("finite-horizon estimate needs horizon and terminal_cost")
    n = int(round(problem.horizon / cfg.dt))
    if abs(n * cfg.dt - problem.horizon) > 1e-9 * max(1.0, problem.horizon):
        raise InvalidInputError("dt must divide the horizon")

    def run(ids):
        m = _Marcher(problem, policy, x0, cfg, ids)
        acc = np.zeros(len(ids))
        for st in m.steps(n):
            acc[st.idx] += np.asarray(problem.running_cost(st.X, st.U), dtype=float) * cfg.dt
        acc += np.where(m.diverged, 0.0, np.asarray(problem.terminal_cost(m.X), dtype=float))
        return {"value": acc, "diverged": m.diverged}

    res = _run(run, cfg, workers)
    ok = ~res["diverged"]
    mean, se = _summarise(res["value"], ok, cfg)
    nd = int(res["diverged"].sum())
    return CostEstimate(mean, se, cfg.paths, cfg.seed, nd, tuple(_diverged_flags(nd, cfg.paths)))


def estimate_discounted(problem: ControlProblem, policy, x0, cfg: SimConfig, workers: int = 1) -> CostEstimate:
    """``E[int_0^T e^{-alpha t} c dt]`` truncated at ``cfg.horizon``.

    The discount is integrated exactly over each step (cost frozen at the left
    endpoint). The reported ``tail_bound`` is ``e^{-alpha T} cbar / alpha`` with
    ``cbar`` the declared ``cost_bound`` or, failing that, the largest running
    cost seen on any path.
    """
    alpha = problem.discount
    if alpha is None or alpha <= 0:
        raise InvalidInputError("discounted estimate needs discount > 0")
    n = cfg.n_steps
    T = n * cfg.dt
    step_w = (1.0 - math.exp(-alpha * cfg.dt)) / alpha

    def run(ids):
        m = _Marcher(problem, policy, x0, cfg, ids)
        acc = np.zeros(len(ids))
        cmax = np.zeros(len(ids))
        for st in m.steps(n):
            c = np.asarray(problem.running_cost(st.X, st.U), dtype=float)
            acc[st.idx] += math.exp(-alpha * st.t) * step_w * c
            cmax[st.idx] = np.maximum(cmax[st.idx], c)
        return {"value": acc, "diverged": m.diverged, "cmax": cmax}

    res = _run(run, cfg, workers)
    ok = ~res["diverged"]
    mean, se = _summarise(res["value"], ok, cfg)
    cbar = cfg.cost_bound if cfg.cost_bound is not None else float(res["cmax"].max())
    tail = math.exp(-alpha * T) * cbar / alpha
    nd = int(res["diverged"].sum())
    flags = _diverged_flags(nd, cfg.paths)
    if cfg.tail_tolerance is not None and tail > cfg.tail_tolerance:
        flags.append(f"tail bound {tail:.3g} exceeds tolerance {cfg.tail_tolerance:.3g}")
    return CostEstimate(mean, se, cfg.paths, cfg.seed, nd, tuple(flags), tail,
                        {"truncation_time": T, "cost_bound": cbar})


def estimate_ergodic(problem: ControlProblem, policy, x0, cfg: SimConfig, workers: int = 1) -> CostEstimate:
    """Long-run average cost after a burn-in fraction, with a two-window check."""
    n = cfg.n_steps
    start = int(math.floor(cfg.burn_in * n))
    half = start + (n - start) // 2
    if n - start < 2:
        raise InvalidInputError("horizon too short for the burn-in window")

    def run(ids):
        m = _Marcher(problem, policy, x0, cfg, ids)
        w1 = np.zeros(len(ids))
        w2 = np.zeros(len(ids))
        for st in m.steps(n):
            if st.k < start:
                continue
            c = np.asarray(problem.running_cost(st.X, st.U), dtype=float)
            if st.k < half:
                w1[st.idx] += c
            else:
                w2[st.idx] += c
        return {"w1": w1, "w2": w2, "diverged": m.diverged}

    res = _run(run, cfg, workers)
    ok = ~res["diverged"]
    avg = (res["w1"] + res["w2"]) / (n - start)
    a1 = res["w1"] / (half - start)
    a2 = res["w2"] / (n - half)
    mean, se = _summarise(avg, ok, cfg)
    dmean, dse = _summarise(a1 - a2, ok, cfg)
    nd = int(res["diverged"].sum())
    flags = _diverged_flags(nd, cfg.paths)
    if abs(dmean) > 5 * dse and dse >= 0:
        flags.append("non-stationary: window averages differ by %.3g (> 5 se)" % abs(dmean))
    diag = {"window1": float(np.mean(a1[ok])), "window2": float(np.mean(a2[ok])),
            "window_diff_se": dse, "burn_in_steps": start}
    return CostEstimate(mean, se, cfg.paths, cfg.seed, nd, tuple(flags), None, diag)


def estimate_exit(problem: ControlProblem, policy, x0, cfg: SimConfig, workers: int = 1) -> CostEstimate:
    """Discounted running cost until the first exit from ``O`` plus the exit cost.

    Paths still inside ``O`` at ``cfg.horizon`` contribute their accumulated
    cost only (a lower bound) and are counted in the diagnostics.
    """
    if problem.exit_domain is None or problem.exit_discount is None or problem.exit_terminal is None:
        raise InvalidInputError("exit estimate needs exit_domain, exit_discount and exit_terminal")
    n = cfg.n_steps

    def run(ids):
        m = _Marcher(problem, policy, x0, cfg, ids, problem.exit_domain)
        acc = np.zeros(len(ids))
        logdisc = np.zeros(len(ids))
        for st in m.steps(n):
            c = np.asarray(problem.running_cost(st.X, st.U), dtype=float)
            delta = np.asarray(problem.exit_discount(st.X, st.U), dtype=float) * np.ones(len(st.idx))
            tau = st.frac * cfg.dt
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(delta > 0, -np.expm1(-delta * tau) / np.where(delta > 0, delta, 1.0), tau)
            acc[st.idx] += np.exp(-logdisc[st.idx]) * c * w
            logdisc[st.idx] += delta * tau
        term = np.zeros(len(ids))
        if m.exited.any():
            term[m.exited] = np.asarray(problem.exit_terminal(m.exit_state[m.exited]), dtype=float)
        acc += np.where(m.exited, np.exp(-logdisc) * term, 0.0)
        return {"value": acc, "diverged": m.diverged, "exited": m.exited, "tau": m.exit_time}

    res = _run(run, cfg, workers)
    ok = ~res["diverged"]
    mean, se = _summarise(res["value"], ok, cfg)
    nd = int(res["diverged"].sum())
    unexited = int((~res["exited"] & ok).sum())
    flags = _diverged_flags(nd, cfg.paths)
    if unexited > 0.01 * cfg.paths:
        flags.append(f"{unexited} paths did not exit before the truncation horizon")
    taus = res["tau"][res["exited"]]
    diag = {"unexited": unexited, "mean_exit_time": float(np.mean(taus)) if len(taus) else float("nan")}
    return CostEstimate(mean, se, cfg.paths, cfg.seed, nd, tuple(flags), None, diag)
