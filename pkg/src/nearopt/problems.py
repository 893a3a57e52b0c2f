"""Built-in benchmark problems, referenced by name from experiment specs."""

from __future__ import annotations

import math

import numpy as np

from .dynamics import ControlProblem, ControlSet, InvalidInputError


def _const_sigma(d: int, s: float):
    def sigma(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(s * np.eye(d), x.shape[:-1] + (d, d)).copy()
    return sigma


def _zero(x, u=None):
    return np.zeros(np.asarray(x).shape[:-1])


def _const(v: float):
    def f(x, u=None):
        return np.full(np.asarray(x).shape[:-1], float(v))
    return f


def _box(bound, m: int) -> ControlSet:
    return ControlSet((-float(bound),) * m, (float(bound),) * m)


def _lq(p: dict) -> ControlProblem:
    d = int(p.get("dim", 1))
    q, r = float(p.get("q", 1.0)), float(p.get("r", 1.0))

    def drift(x, u):
        return np.asarray(u, dtype=float) + 0.0 * np.asarray(x)

    def cost(x, u):
        return q * np.sum(np.asarray(x) ** 2, axis=-1) + r * np.sum(np.asarray(u) ** 2, axis=-1)

    return ControlProblem(
        d, _box(p.get("u_bound", 2.0), d), drift, _const_sigma(d, float(p.get("sigma", 1.0))), cost,
        terminal_cost=_zero, horizon=float(p.get("horizon", 1.0)), discount=float(p.get("discount", 1.0)),
        name="lq", params=dict(p))


def _double_well(p: dict) -> ControlProblem:
    w = float(p.get("control_weight", 0.1))

    def drift(x, u):
        return np.asarray(u, dtype=float) + 0.0 * np.asarray(x)

    def cost(x, u):
        x0 = np.asarray(x)[..., 0]
        return (x0 ** 2 - 1.0) ** 2 + w * np.asarray(u)[..., 0] ** 2

    return ControlProblem(
        1, _box(p.get("u_bound", 1.0), 1), drift, _const_sigma(1, float(p.get("sigma", 0.5))), cost,
        terminal_cost=_zero, horizon=float(p.get("horizon", 1.0)), discount=float(p.get("discount", 1.0)),
        name="double_well", params=dict(p))


def _ou(p: dict) -> ControlProblem:
    theta = float(p.get("theta", 1.0))

    def drift(x, u):
        return -theta * np.asarray(x) + 0.0 * np.asarray(u)

    def cost(x, u):
        return np.asarray(x)[..., 0] ** 2 + 0.0 * np.asarray(u)[..., 0]

    return ControlProblem(
        1, ControlSet((0.0,), (0.0,)), drift, _const_sigma(1, float(p.get("sigma", math.sqrt(2.0)))), cost,
        terminal_cost=_zero, horizon=float(p.get("horizon", 5.0)), discount=float(p.get("discount", 1.0)),
        name="ou", params=dict(p))


def _brownian_exit(p: dict) -> ControlProblem:
    lo, hi = float(p.get("lower", -1.0)), float(p.get("upper", 1.0))
    return ControlProblem(
        1, ControlSet((0.0,), (0.0,)), lambda x, u: 0.0 * np.asarray(x) + 0.0 * np.asarray(u),
        _const_sigma(1, float(p.get("sigma", math.sqrt(2.0)))), _const(p.get("running", 1.0)),
        exit_domain=((lo,), (hi,)), exit_discount=_const(p.get("delta", 0.0)),
        exit_terminal=_const(p.get("terminal", 0.0)), name="brownian_exit", params=dict(p))


def _controlled_ou(p: dict) -> ControlProblem:
    theta, r = float(p.get("theta", 0.0)), float(p.get("r", 0.5))

    def drift(x, u):
        return -theta * np.asarray(x) + np.asarray(u)

    def cost(x, u):
        return np.asarray(x)[..., 0] ** 2 + r * np.asarray(u)[..., 0] ** 2

    return ControlProblem(
        1, _box(p.get("u_bound", 1.0), 1), drift, _const_sigma(1, float(p.get("sigma", math.sqrt(2.0)))), cost,
        terminal_cost=_zero, horizon=float(p.get("horizon", 1.0)), discount=float(p.get("discount", 1.0)),
        name="controlled_ou_ergodic", params=dict(p))


BUILTINS = {
    "lq": _lq,
    "double_well": _double_well,
    "ou": _ou,
    "brownian_exit": _brownian_exit,
    "controlled_ou_ergodic": _controlled_ou,
}


def builtin_problem(name: str, params: dict | None = None) -> ControlProblem:
    """Construct a named benchmark problem.

    ============================  =====================================================
    ``lq``                        b = u, sigma const, c = q|x|^2 + r|u|^2, U = [-2, 2]^d
    ``double_well``               b = u, c = (x^2 - 1)^2 + 0.1 u^2, U = [-1, 1]
    ``ou``                        b = -theta x, sigma = sqrt 2, c = x^2, U = {0}
    ``brownian_exit``             b = 0, sigma = sqrt 2, O = (-1, 1), c = 1, delta = 0, c_e = 0
    ``controlled_ou_ergodic``     b = -theta x + u, sigma = sqrt 2, c = x^2 + u^2 / 2, U = [-1, 1]
    ============================  =====================================================
    """
    if name not in BUILTINS:
        raise InvalidInputError(f"unknown problem {name!r}; available: {', '.join(sorted(BUILTINS))}")
    return BUILTINS[name](dict(params or {}))


def lq_discounted_gain(alpha: float, q: float = 1.0, r: float = 1.0) -> float:
    """Positive root P of P^2 / r + alpha P - q = 0 (value V = P x^2 + const)."""
    return r * (-alpha + math.sqrt(alpha * alpha + 4.0 * q / r)) / 2.0
