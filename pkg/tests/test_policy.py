import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nearopt.dynamics import ControlSet, InvalidInputError
from nearopt.grid import Grid, ValueField
from nearopt.policy import (GridPolicy, Mollifier, PairingDictionary, UnderResolvedWarning, borkar_pairing,
                            default_dictionary, dumps_field, dumps_policy, evaluate, kernel_lipschitz_constant,
                            lipschitz_estimate, loads_field, loads_policy, mollify, pairing_gap, policy_csv)

U1 = ControlSet((-1.0,), (1.0,))

# (phi_0.5 * sign)(x) at x = -0.45, -0.35, ..., 0.45 by adaptive quadrature (tests/oracles.py)
SIGN_PROBES = (-0.45, -0.35, -0.25, -0.15, -0.05, 0.05, 0.15, 0.25, 0.35, 0.45)
SIGN_ORACLE = (-0.9996128437500004, -0.9757936562500001, -0.8588867187500003, -0.60030853125,
               -0.2165755937499999, 0.2165755937499999, 0.60030853125, 0.8588867187500003,
               0.9757936562500001, 0.9996128437500004)
GRAD_L1_1D = 2.1875  # int |phi'| for the 1-D bump
GAUSS_SQUARE_PAIRING = 1.7724146965190428  # int_{-3}^{3} exp(-x^2) dx


def sign_policy(h=0.01, L=2.0):
    g = Grid.from_spacing([-L], [L], h)
    return GridPolicy.from_function(g, U1, lambda P: np.sign(P[:, :1]))


def test_evaluate_constant():
    g = Grid.from_spacing([-1], [1], 0.5)
    p = GridPolicy.constant(g, U1, [0.3])
    np.testing.assert_array_equal(evaluate(p, [[0.77], [-0.1]]), [[0.3], [0.3]])


def test_evaluate_two_nodes():
    g = Grid((0.0,), (1.0,), (2,))
    v = np.array([[-1.0], [1.0]])
    assert evaluate(GridPolicy(g, v, U1, "multilinear"), [0.5])[0] == 0.0
    assert evaluate(GridPolicy(g, v, U1, "nearest"), [0.4])[0] == -1.0


def test_evaluate_clamps_outside_box():
    g = Grid((0.0,), (1.0,), (2,))
    p = GridPolicy(g, np.array([[-1.0], [1.0]]), U1, "multilinear")
    assert evaluate(p, [5.0])[0] == 1.0 and evaluate(p, [-5.0])[0] == -1.0


def test_policy_rejects_values_outside_U():
    g = Grid((0.0,), (1.0,), (2,))
    with pytest.raises(InvalidInputError):
        GridPolicy(g, np.array([[-1.5], [1.0]]), U1)


@settings(max_examples=40, deadline=None)
@given(vals=st.lists(st.floats(-1, 1), min_size=12, max_size=12), pts=st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_evaluation_stays_in_U(vals, pts):
    g = Grid((-1.0, 0.0), (1.0, 2.0), (4, 3))
    cs = ControlSet((-1.0,), (1.0,))
    p = GridPolicy(g, np.array(vals).reshape(4, 3, 1), cs, "multilinear")
    x = np.array([(a, a / 2) for a in pts])
    out = p(x)
    assert np.all(out >= -1) and np.all(out <= 1)


def test_mollifier_mass_and_support():
    m = Mollifier(1.0, 1)
    z = np.linspace(-1.2, 1.2, 200001)[:, None]
    k = m(z)
    assert np.all(k >= 0) and np.all(k[np.abs(z[:, 0]) >= 1] == 0)
    assert np.trapezoid(k, z[:, 0]) == pytest.approx(1.0, abs=1e-6)
    for d in (2, 3):
        m = Mollifier(0.7, d)
        r = np.linspace(0, 0.7, 20001)
        shell = 2 * np.pi ** (d / 2) / math.gamma(d / 2) * r ** (d - 1)
        assert np.trapezoid(m(np.c_[r, np.zeros((len(r), d - 1))]) * shell, r) == pytest.approx(1.0, abs=1e-6)


def test_kernel_constant_frozen():
    assert kernel_lipschitz_constant(1) == pytest.approx(GRAD_L1_1D, rel=1e-10)


def test_mollify_constant_exact():
    g = Grid.from_spacing([-2, -1], [2, 1], 0.1)
    cs = ControlSet((-1.0, 0.0), (1.0, 1.0))
    p = GridPolicy.constant(g, cs, [0.3, 0.7])
    for eta in (0.15, 0.4, 1.3):
        np.testing.assert_array_equal(mollify(p, eta).values, p.values)


def test_mollified_sign_matches_quadrature():
    h = 0.01
    v = mollify(sign_policy(h), 0.5)
    got = v(np.array(SIGN_PROBES)[:, None])[:, 0]
    assert np.max(np.abs(got - np.array(SIGN_ORACLE))) <= 2 * h


def test_mollified_sign_support_and_oddness():
    h = 0.01
    p = sign_policy(h)
    v = mollify(p, 0.5)
    x = p.grid.points[:, 0]
    far = np.abs(x) >= 0.5 + h - 1e-12
    np.testing.assert_array_equal(v.flat_values[far, 0], np.sign(x[far]))
    np.testing.assert_array_equal(v.flat_values[::-1, 0], -v.flat_values[:, 0])


def test_under_resolved_returns_input():
    p = sign_policy(0.1)
    with pytest.warns(UnderResolvedWarning):
        out = mollify(p, 0.04)
    assert out is p


@settings(max_examples=30, deadline=None)
@given(vals=st.lists(st.floats(-1, 1), min_size=30, max_size=30), eta=st.floats(0.06, 2.0))
def test_mollify_keeps_U_and_shrinks_spread(vals, eta):
    g = Grid.from_spacing([0], [2.9], 0.1)
    p = GridPolicy(g, np.array(vals)[:, None], U1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnderResolvedWarning)
        v = mollify(p, eta).values
    assert np.all(v >= -1) and np.all(v <= 1)
    assert v.max() - v.min() <= max(vals) - min(vals) + 1e-15
    assert v.max() <= max(vals) + 1e-15 and v.min() >= min(vals) - 1e-15


def test_mollify_converges_on_continuous_policy():
    h = 0.01
    g = Grid.from_spacing([-3], [3], h)
    p = GridPolicy.from_function(g, U1, lambda P: np.tanh(P[:, :1]), "multilinear")
    eta = 2 * h
    dev = np.max(np.abs(mollify(p, eta).values - p.values))
    modulus = 2 * eta  # tanh is 1-Lipschitz
    assert dev <= modulus + h ** 2


def test_lipschitz_estimates():
    g = Grid.from_spacing([-1], [1], 0.1)
    assert lipschitz_estimate(GridPolicy.constant(g, U1, [0.2])) == 0.0
    lin = GridPolicy.from_function(g, U1, lambda P: P[:, :1])
    assert lipschitz_estimate(lin) == pytest.approx(1.0, rel=1e-12)


def test_mollified_sign_lipschitz_bound():
    p = sign_policy(0.01)
    for eta in (0.8, 0.4, 0.2, 0.1, 0.05):
        L = lipschitz_estimate(mollify(p, eta))
        # |d/dx (phi_eta * v)| <= sup|v| * int |phi_eta'| = K / eta
        assert 0 < L <= GRAD_L1_1D / eta
        # the jump of height 2 forces at least the peak kernel slope
        assert L >= 0.9 * 2 * (35 / 32) / eta


def test_pairings():
    p = sign_policy(0.01, 3.0)
    g = p.grid
    assert borkar_pairing(p, lambda P: 0 * P[:, 0], lambda P, u: u[:, 0]) == 0.0
    hat = lambda P: np.maximum(0, 1 - np.abs(2 * P[:, 0] - 1)) * ((P[:, 0] >= 0) & (P[:, 0] <= 1))
    c0 = GridPolicy.constant(g, U1, [0.4])
    assert borkar_pairing(c0, hat, lambda P, u: u[:, 0]) == pytest.approx(0.4 * 0.5, rel=1e-12)
    # an even node count keeps x = 0 (where sign vanishes) off the grid
    even = GridPolicy.from_function(Grid((-3.0,), (3.0,), (600,)), U1, lambda P: np.sign(P[:, :1]))
    val = borkar_pairing(even, lambda P: np.exp(-P[:, 0] ** 2), lambda P, u: u[:, 0] ** 2)
    assert val == pytest.approx(GAUSS_SQUARE_PAIRING, abs=1e-4)


def test_pairing_gap_cases():
    p = sign_policy(0.02)
    g = p.grid
    d = default_dictionary(g, U1)
    assert len(d) == 6
    assert pairing_gap(p, p, d) == 0.0
    a = GridPolicy.constant(g, ControlSet((-2.0,), (2.0,)), [0.1])
    b = GridPolicy.constant(g, ControlSet((-2.0,), (2.0,)), [0.35])
    f = lambda P: np.exp(-P[:, 0] ** 2)
    one = PairingDictionary([(f, lambda P, u: u[:, 0])], [2.0])
    from nearopt.policy import trapezoid_weights
    intf = float(np.sum(trapezoid_weights(g).ravel() * f(g.points)))
    assert pairing_gap(a, b, one) == pytest.approx(0.25 * intf, rel=1e-12)
    with pytest.raises(InvalidInputError):
        pairing_gap(a, b, PairingDictionary([]))


def test_pairing_gap_ladder_monotone():
    p = sign_policy(0.01)
    d = default_dictionary(p.grid, U1)
    gaps = [pairing_gap(p, mollify(p, eta), d) for eta in (0.8, 0.4, 0.2, 0.1)]
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] <= 0.5 * gaps[0]


def test_time_policy_mollify_and_dictionary():
    g = Grid((0.0, -1.0), (1.0, 1.0), (11, 41), has_time=True)
    p = GridPolicy.from_function(g, U1, lambda P: np.sign(P[:, 1:2] - 0.2 * P[:, :1]))
    v = mollify(p, 0.2, time_bandwidth=0.2)
    assert v.values.shape == p.values.shape
    assert np.all(np.abs(v.values) <= 1)
    d = default_dictionary(g, U1)
    assert pairing_gap(p, v, d) > 0


def test_text_round_trip():
    p = mollify(sign_policy(0.05), 0.3)
    q = loads_policy(dumps_policy(p))
    np.testing.assert_array_equal(q.values, p.values)
    assert q.grid == p.grid and q.interpolation == p.interpolation and q.control_set == p.control_set
    g = Grid.from_spacing([-1, 0], [1, 1], 0.25)
    f = ValueField(g, np.random.default_rng(1).normal(size=g.shape), "dirichlet")
    f2 = loads_field(dumps_field(f))
    np.testing.assert_array_equal(f2.values, f.values)
    assert f2.boundary_kind == "dirichlet"
    assert policy_csv(p).splitlines()[0].startswith("x1")
