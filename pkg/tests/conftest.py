import numpy as np
import pytest

from diffrope import rope as rp
from diffrope.solvers import SolverParams


def hanging_template(K=20, length=1.0, span=0.7):
    """Rope of rest length ``length`` with both ends pinned ``span`` apart at equal height."""
    base = rp.RopeState.straight(K, length, fixed=[0, K - 1])
    placed = rp.anchored(base, {0: np.zeros(3), K - 1: np.array([span, 0.0, 0.0])})
    return rp.RopeState(
        placed.positions, placed.quaternions, base.rest_positions, base.rest_quaternions, base.inv_mass, base.inv_inertia
    )


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def hanging():
    return hanging_template()


@pytest.fixture
def hanging_params():
    return SolverParams(eta_x_G=0.024, iterations=50)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
