"""Grid policies, kernel mollification and the test-function pairing meter."""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import gamma

from .dynamics import ControlSet, InvalidInputError
from .grid import Grid, ValueField

INTERPOLATIONS = ("nearest", "multilinear")


class UnderResolvedWarning(UserWarning):
    """The mollifier bandwidth is below half the grid spacing."""


@dataclass(frozen=True)
class GridPolicy:
    """Deterministic policy stored as one control per grid node.

    ``values`` has shape ``grid.shape + (m,)``. For a Markov (time-dependent)
    policy the grid carries a leading time axis and points are ``(t, x)``.
    """

    grid: Grid
    values: np.ndarray
    control_set: ControlSet
    interpolation: str = "nearest"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        m = self.control_set.dim
        if vals.shape == self.grid.shape and m == 1:
            vals = vals[..., None]
        if vals.shape != self.grid.shape + (m,):
            raise InvalidInputError(f"policy values have shape {vals.shape}, expected {self.grid.shape + (m,)}")
        if self.interpolation not in INTERPOLATIONS:
            raise InvalidInputError(f"interpolation must be one of {INTERPOLATIONS}")
        if not np.all(self.control_set.contains(vals)):
            raise InvalidInputError("policy has node values outside the control set")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid: Grid, control_set: ControlSet, u, interpolation="nearest") -> "GridPolicy":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(grid, np.broadcast_to(u, grid.shape + (control_set.dim,)), control_set, interpolation)

    @classmethod
    def from_function(cls, grid: Grid, control_set: ControlSet, fn: Callable, interpolation="nearest") -> "GridPolicy":
        vals = np.asarray(fn(grid.points), dtype=float).reshape(grid.shape + (control_set.dim,))
        return cls(grid, control_set.project(vals), control_set, interpolation)

    @property
    def has_time(self) -> bool:
        return self.grid.has_time

    @property
    def flat_values(self) -> np.ndarray:
        return self.values.reshape(-1, self.control_set.dim)

    def with_interpolation(self, interpolation: str) -> "GridPolicy":
        return GridPolicy(self.grid, self.values, self.control_set, interpolation)

    def __call__(self, x) -> np.ndarray:
        """Vectorised evaluation; ``x`` has shape ``(..., grid.ndim)``."""
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        x = x.reshape(-1, self.grid.ndim)
        lo = np.array(self.grid.lower)
        h = np.where(np.isfinite(self.grid.spacing), self.grid.spacing, 1.0)
        u = (self.grid.clamp(x) - lo) / h
        shape = np.array(self.grid.shape)
        flat = self.flat_values
        if self.interpolation == "nearest":
            idx = np.clip(np.floor(u + 0.5).astype(np.int64), 0, shape - 1)
            out = flat[np.ravel_multi_index(idx.T, self.grid.shape)]
        else:
            i0 = np.clip(np.floor(u).astype(np.int64), 0, np.maximum(shape - 2, 0))
            w = np.clip(u - i0, 0.0, 1.0)
            w[:, shape == 1] = 0.0
            out = np.zeros((len(x), flat.shape[1]))
            for corner in itertools.product((0, 1), repeat=self.grid.ndim):
                c = np.array(corner)
                idx = np.minimum(i0 + c, shape - 1)
                wc = np.prod(np.where(c == 1, w, 1.0 - w), axis=1)
                out += wc[:, None] * flat[np.ravel_multi_index(idx.T, self.grid.shape)]
        out = self.control_set.project(out)
        return out.reshape(lead + (flat.shape[1],))


def evaluate(policy: GridPolicy, x) -> np.ndarray:
    """Control at a single point (time first for Markov policies); clamped to the box."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return policy(x[None, :])[0]


# --------------------------------------------------------------------------
# mollifier

def _bump_mass(d: int) -> float:
    # integral of (1-|x|^2)^3 over the unit ball in R^d
    return math.pi ** (d / 2) * gamma(4) / gamma(4 + d / 2)


@dataclass(frozen=True)
class Mollifier:
    """Polynomial bump ``phi(x) = C_d (1-|x|^2)^3`` on the unit ball, scaled to
    ``phi_eta(x) = eta^-d phi(x/eta)``."""

    bandwidth: float
    dim: int = 1

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InvalidInputError("bandwidth must be positive")

    @property
    def norm_const(self) -> float:
        return 1.0 / _bump_mass(self.dim)

    def phi(self, z) -> np.ndarray:
        """Unscaled kernel at points ``z`` of shape ``(..., dim)``."""
        r2 = np.sum(np.asarray(z, dtype=float) ** 2, axis=-1)
        return np.where(r2 < 1.0, self.norm_const * (1.0 - r2) ** 3, 0.0)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.phi(z / self.bandwidth) / self.bandwidth ** self.dim

    def gradient_l1(self) -> float:
        """``int |grad phi|`` for the unscaled kernel (so ``||grad phi_eta||_1 = this / eta``)."""
        d = self.dim
        surface = 2 * math.pi ** (d / 2) / gamma(d / 2)
        val, _ = integrate.quad(lambda r: 6 * r * (1 - r * r) ** 2 * r ** (d - 1), 0.0, 1.0)
        return self.norm_const * surface * val


def kernel_lipschitz_constant(dim: int = 1) -> float:
    """``K`` with ``Lip(phi_eta * v) <= K * (spread of v) / (2 eta)`` for bounded ``v``."""
    return Mollifier(1.0, dim).gradient_l1()


def _offset_weights(grid: Grid, eta: float, time_bandwidth: float | None):
    h = grid.spacing
    radii = []
    for ax in range(grid.ndim):
        bw = time_bandwidth if (grid.has_time and ax == 0) else eta
        radii.append(int(math.floor(bw / h[ax] * (1 - 1e-12))) if np.isfinite(h[ax]) else 0)
    offsets = list(itertools.product(*[range(-r, r + 1) for r in radii]))
    off = np.array(offsets, dtype=float) * np.where(np.isfinite(h), h, 0.0)
    if grid.has_time:
        kt = Mollifier(time_bandwidth, 1)(off[:, :1])
        kx = Mollifier(eta, grid.space_ndim)(off[:, 1:])
        w = kt * kx
    else:
        w = Mollifier(eta, grid.ndim)(off)
    keep = w > 0
    return [o for o, k in zip(offsets, keep) if k], w[keep], radii


def mollify(policy: GridPolicy, eta: float, time_bandwidth: float | None = None) -> GridPolicy:
    """Discrete convolution of the policy with ``phi_eta`` over grid nodes.

    Weights are renormalised over the nodes that exist, so near the box edge
    the kernel is truncated and every output is a convex combination of input
    values. Markov policies are smoothed jointly in ``(t, x)`` with a product
    kernel (``time_bandwidth`` defaults to ``eta``). The result interpolates
    multilinearly. If ``eta`` is below half the smallest space spacing the input
    is returned unchanged with an :class:`UnderResolvedWarning`.
    """
    if not eta > 0:
        raise InvalidInputError("eta must be positive")
    grid = policy.grid
    space_h = grid.spacing[1:] if grid.has_time else grid.spacing
    finite = space_h[np.isfinite(space_h)]
    if finite.size and eta < 0.5 * finite.min():
        warnings.warn(f"eta={eta} is below half the grid spacing; policy returned unchanged",
                      UnderResolvedWarning, stacklevel=2)
        return policy
    if grid.has_time and time_bandwidth is None:
        time_bandwidth = eta
    offsets, weights, radii = _offset_weights(grid, eta, time_bandwidth)

    v = np.asarray(policy.values)
    pad = [(r, r) for r in radii] + [(0, 0)]
    vp = np.pad(v, pad)
    mp = np.pad(np.ones(grid.shape), pad[:-1])
    acc = np.zeros_like(v)
    wsum = np.zeros(grid.shape)

    def shifted(off):
        sl = tuple(slice(r + o, r + o + n) for r, o, n in zip(radii, off, grid.shape))
        return vp[sl], mp[sl]

    # offsets o and -o are added as one term so mirrored inputs give exactly
    # mirrored outputs; the fixed order keeps results bit-reproducible
    for off, w in zip(offsets, weights):
        if off <= tuple(-o for o in off):
            continue
        vp_, mp_ = shifted(off)
        vm_, mm_ = shifted(tuple(-o for o in off))
        acc += w * (mp_[..., None] * (vp_ - v) + mm_[..., None] * (vm_ - v))
        wsum += w * (mp_ + mm_)
    wsum += weights[offsets.index(tuple(0 for _ in offsets[0]))]
    out = v + acc / wsum[..., None]
    out = policy.control_set.project(out)
    return GridPolicy(grid, out, policy.control_set, "multilinear")


def lipschitz_estimate(policy: GridPolicy) -> float:
    """Largest ``|dv| / |dx|`` over axis-adjacent node pairs."""
    v = policy.values
    best = 0.0
    for ax, (n, h) in enumerate(zip(policy.grid.shape, policy.grid.spacing)):
        if n < 2:
            continue
        dv = np.linalg.norm(np.diff(v, axis=ax), axis=-1) / h
        best = max(best, float(dv.max()))
    return best


# --------------------------------------------------------------------------
# pairing meter

def trapezoid_weights(grid: Grid) -> np.ndarray:
    w = np.ones(grid.shape)
    for ax, (n, h) in enumerate(zip(grid.shape, grid.spacing)):
        if n < 2:
            continue
        wa = np.full(n, h)
        wa[0] = wa[-1] = 0.5 * h
        shape = [1] * grid.ndim
        shape[ax] = n
        w = w * wa.reshape(shape)
    return w


def borkar_pairing(policy: GridPolicy, f: Callable, g: Callable) -> float:
    """Trapezoidal ``int f(x) g(x, v(x)) dx`` over the policy's grid box.

    For Markov policies the integral runs over time and space and ``f``, ``g``
    receive ``(t, x)`` points.
    """
    pts = policy.grid.points
    fv = np.asarray(f(pts), dtype=float).reshape(-1)
    gv = np.asarray(g(pts, policy.flat_values), dtype=float).reshape(-1)
    return float(np.sum(trapezoid_weights(policy.grid).ravel() * fv * gv))


@dataclass
class PairingDictionary:
    pairs: list
    g_bounds: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def default_dictionary(grid: Grid, control_set: ControlSet) -> PairingDictionary:
    """Six ``(f, g)`` pairs built from a Gaussian, a hat and a windowed sine.

    The test functions are placed relative to the grid's (space) box; for a
    time grid each ``f`` is multiplied by a ``sin(pi t / T)`` window.
    """
    sg = grid.space_grid()
    lo, hi = np.array(sg.lower), np.array(sg.upper)
    c = 0.5 * (lo + hi)
    L = np.maximum(0.5 * (hi - lo), 1e-12)
    t_axis = grid.has_time
    T = grid.upper[0] if t_axis else 1.0

    def split(p):
        p = np.asarray(p, dtype=float)
        if t_axis:
            return np.sin(np.pi * p[:, 0] / T), p[:, 1:]
        return np.ones(len(p)), p

    def gauss(p):
        w, x = split(p)
        z = (x - (c + 0.25 * L)) / (0.25 * L)
        return w * np.exp(-0.5 * np.sum(z ** 2, axis=1))

    def hat(p):
        w, x = split(p)
        z = np.abs(x - (c - 0.3 * L)) / (0.4 * L)
        return w * np.prod(np.maximum(0.0, 1.0 - z), axis=1)

    def sine(p):
        w, x = split(p)
        z = (x - c) / L
        return w * np.sin(np.pi * z[:, 0]) * np.prod(np.cos(0.5 * np.pi * z) ** 2, axis=1)

    def window(p):
        _, x = split(p)
        return np.exp(-np.sum(((x - c) / L) ** 2, axis=1))

    def g_lin(p, u):
        return np.sum(u, axis=1)

    def g_sq(p, u):
        return np.sum(u ** 2, axis=1)

    def g_win(p, u):
        return window(p) * np.sum(u, axis=1)

    umax = float(np.max(np.abs(np.r_[control_set.lower, control_set.upper])))
    m = control_set.dim
    pairs = [(gauss, g_lin), (gauss, g_sq), (hat, g_lin), (hat, g_win), (sine, g_lin), (sine, g_sq)]
    bounds = [m * umax, m * umax ** 2, m * umax, m * umax, m * umax, m * umax ** 2]
    return PairingDictionary(pairs, bounds)


def pairing_gap(policy_a: GridPolicy, policy_b: GridPolicy, dictionary: PairingDictionary) -> float:
    if len(dictionary.pairs) == 0:
        raise InvalidInputError("pairing dictionary is empty")
    return max(abs(borkar_pairing(policy_a, f, g) - borkar_pairing(policy_b, f, g))
               for f, g in dictionary.pairs)


# --------------------------------------------------------------------------
# text / CSV formats

HEADER_TAG = "#nearopt-grid"


def _header(kind: str, grid: Grid, **extra) -> str:
    meta = {"kind": kind, "grid": grid.to_dict(), "spacing": [float(h) for h in grid.spacing]}
    meta.update(extra)
    return f"{HEADER_TAG} {json.dumps(meta, sort_keys=True)}"


def _rows(arr: np.ndarray) -> list[str]:
    return [" ".join(repr(float(v)) for v in row) for row in arr]


def dumps_policy(policy: GridPolicy) -> str:
    head = _header("policy", policy.grid, interpolation=policy.interpolation,
                   control_lower=list(policy.control_set.lower),
                   control_upper=list(policy.control_set.upper))
    return "\n".join([head] + _rows(policy.flat_values)) + "\n"


def dumps_field(vf: ValueField) -> str:
    head = _header("value", vf.grid, boundary_kind=vf.boundary_kind)
    return "\n".join([head] + _rows(vf.values.reshape(-1, 1))) + "\n"


def _parse(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(HEADER_TAG):
        raise InvalidInputError("missing grid header line")
    meta = json.loads(lines[0][len(HEADER_TAG):])
    data = np.array([[float(t) for t in ln.split()] for ln in lines[1:]], dtype=float)
    return meta, data


def loads_policy(text: str) -> GridPolicy:
    meta, data = _parse(text)
    if meta["kind"] != "policy":
        raise InvalidInputError("not a policy file")
    grid = Grid.from_dict(meta["grid"])
    cs = ControlSet(tuple(meta["control_lower"]), tuple(meta["control_upper"]))
    return GridPolicy(grid, data.reshape(grid.shape + (cs.dim,)), cs, meta["interpolation"])


def loads_field(text: str) -> ValueField:
    meta, data = _parse(text)
    if meta["kind"] != "value":
        raise InvalidInputError("not a value-field file")
    grid = Grid.from_dict(meta["grid"])
    return ValueField(grid, data.reshape(grid.shape), meta["boundary_kind"])


def to_csv(grid: Grid, values: np.ndarray, value_names: list[str]) -> str:
    names = (["t"] if grid.has_time else []) + [f"x{i + 1}" for i in range(grid.space_ndim)]
    vals = np.asarray(values, dtype=float).reshape(grid.size, -1)
    lines = [",".join(names + value_names)]
    for p, v in zip(grid.points, vals):
        lines.append(",".join(repr(float(a)) for a in np.r_[p, v]))
    return "\n".join(lines) + "\n"


def policy_csv(policy: GridPolicy) -> str:
    return to_csv(policy.grid, policy.flat_values, [f"u{i + 1}" for i in range(policy.control_set.dim)])


def field_csv(vf: ValueField) -> str:
    return to_csv(vf.grid, vf.values, ["value"])
