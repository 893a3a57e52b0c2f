import numpy as np
import pytest

from nearopt.dynamics import ControlProblem, ControlSet


def const_sigma(d, s):
    return lambda x: np.broadcast_to(s * np.eye(d), np.shape(x)[:-1] + (d, d)).copy()


def scalar_problem(drift, sigma, cost, lo=-1.0, hi=1.0, **extra):
    """1-D problem from scalar-style callables ``drift(x, u)``, ``cost(x, u)``."""
    return ControlProblem(
        1, ControlSet((lo,), (hi,)),
        lambda x, u: np.asarray(drift(np.asarray(x)[..., :1], np.asarray(u)[..., :1]), dtype=float)
        * np.ones(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (1,)),
        const_sigma(1, sigma),
        lambda x, u: np.asarray(cost(np.asarray(x)[..., 0], np.asarray(u)[..., 0]), dtype=float)
        * np.ones(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])),
        **extra)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
