"""Uniform rectangular grids over axis-aligned boxes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


def _axis(lo: float, hi: float, n: int) -> np.ndarray:
    # Built from the midpoint so that a box symmetric about 0 gives nodes
    # that are exact negatives of each other.
    if n == 1:
        return np.array([0.5 * (lo + hi)])
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    k = np.arange(n)
    return mid + half * ((2 * k - (n - 1)) / (n - 1))


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid with ``shape[i]`` nodes on ``[lower[i], upper[i]]``.

    When ``has_time`` is set, axis 0 is the time axis ``[0, T]`` and the
    remaining axes are space.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    shape: tuple[int, ...]
    has_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if not (len(self.lower) == len(self.upper) == len(self.shape)):
            raise ValueError("lower, upper and shape must have equal length")
        for lo, hi, n in zip(self.lower, self.upper, self.shape):
            if n < 1:
                raise ValueError("every axis needs at least one node")
            if hi < lo or (n > 1 and hi == lo):
                raise ValueError(f"degenerate axis [{lo}, {hi}] with {n} nodes")

    @classmethod
    def from_spacing(cls, lower, upper, spacing, has_time: bool = False) -> "Grid":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), lower.shape)
        shape = [int(round((hi - lo) / h)) + 1 for lo, hi, h in zip(lower, upper, spacing)]
        return cls(tuple(lower), tuple(upper), tuple(shape), has_time)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def space_ndim(self) -> int:
        return self.ndim - int(self.has_time)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(_axis(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.shape))

    @cached_property
    def spacing(self) -> np.ndarray:
        return np.array(
            [(hi - lo) / (n - 1) if n > 1 else np.inf
             for lo, hi, n in zip(self.lower, self.upper, self.shape)]
        )

    @cached_property
    def points(self) -> np.ndarray:
        """All nodes as an ``(size, ndim)`` array in row-major order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def space_grid(self) -> "Grid":
        if not self.has_time:
            return self
        return Grid(self.lower[1:], self.upper[1:], self.shape[1:])

    def with_time(self, horizon: float, n_times: int) -> "Grid":
        if self.has_time:
            raise ValueError("grid already has a time axis")
        return Grid((0.0,) + self.lower, (float(horizon),) + self.upper,
                    (int(n_times),) + self.shape, has_time=True)

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, np.array(self.lower), np.array(self.upper))

    def nearest_index(self, x) -> tuple[int, ...]:
        x = np.asarray(x, dtype=float).reshape(self.ndim)
        u = (self.clamp(x) - np.array(self.lower)) / np.where(np.isfinite(self.spacing), self.spacing, 1.0)
        idx = np.clip(np.floor(u + 0.5).astype(int), 0, np.array(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def is_interior(self, index) -> bool:
        return all(0 < i < n - 1 for i, n in zip(index, self.shape))

    def boundary_mask(self) -> np.ndarray:
        """Boolean array of ``shape`` marking nodes on the box boundary."""
        mask = np.zeros(self.shape, dtype=bool)
        for ax, n in enumerate(self.shape):
            sl = [slice(None)] * self.ndim
            sl[ax] = 0
            mask[tuple(sl)] = True
            sl[ax] = n - 1
            mask[tuple(sl)] = True
        return mask

    def inner_mask(self, fraction: float = 0.5) -> np.ndarray:
        """Nodes inside the concentric sub-box scaled by ``fraction``."""
        lo = np.array(self.lower)
        hi = np.array(self.upper)
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * fraction
        pts = self.points
        inside = np.all((pts >= mid - half - 1e-12) & (pts <= mid + half + 1e-12), axis=1)
        return inside.reshape(self.shape)

    def nearest_origin_index(self) -> tuple[int, ...]:
        return self.nearest_index(np.zeros(self.ndim))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper),
                "shape": list(self.shape), "has_time": self.has_time}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(d["lower"]), tuple(d["upper"]), tuple(d["shape"]),
                   bool(d.get("has_time", False)))


BOUNDARY_KINDS = ("reflecting", "dirichlet", "terminal")


@dataclass
class ValueField:
    """Samples of a value function on a grid.

    ``boundary_kind`` records how the edge of the grid was treated:
    ``reflecting`` for truncated whole-space problems, ``dirichlet`` for exit
    problems and ``terminal`` for finite-horizon fields whose last time slice
    is the terminal cost. ``lookahead`` (finite horizon only) holds, for each
    stored slice, the field one solver step later, which is what the control
    at that slice was minimised against.
    """

    grid: Grid
    values: np.ndarray
    boundary_kind: str = "reflecting"
    lookahead: np.ndarray | None = None
    residuals: list = None
    info: dict = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")
        if self.boundary_kind not in BOUNDARY_KINDS:
            raise ValueError(f"unknown boundary kind {self.boundary_kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value field contains non-finite entries")
        if self.residuals is None:
            self.residuals = []
        if self.info is None:
            self.info = {}

    def at(self, x) -> float:
        """Multilinear interpolation of the field at a point (clamped to the box)."""
        from scipy.interpolate import RegularGridInterpolator

        x = self.grid.clamp(np.asarray(x, dtype=float).reshape(self.grid.ndim))
        axes = [a if len(a) > 1 else np.array([a[0], a[0] + 1.0]) for a in self.grid.axes]
        vals = self.values
        for ax, a in enumerate(self.grid.axes):
            if len(a) == 1:
                vals = np.concatenate([vals, vals], axis=ax)
        return float(RegularGridInterpolator(axes, vals)(x[None, :])[0])
