import numpy as np
import pytest

from ltvobs.ltv_core import LtvSystem, MatrixFn
from ltvobs.observability import build_counterexample
from ltvobs.range_localization import BeaconConfig, Scenario, Trajectory, load_bundled

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def const_system(A, C):
    A = np.asarray(A, float)
    return LtvSystem(MatrixFn.const(A), MatrixFn.const(np.zeros((A.shape[0], 1))), MatrixFn.const(C))


def make_scenario(beacons, kind="circular", params=None, bias=(0.1, -0.05), x0=None,
                  horizon=30.0, dt=0.01, delta=2 * np.pi, alpha=None):
    beacons = np.asarray(beacons, float)
    n = beacons.shape[1]
    params = {} if params is None else params
    x0 = np.linspace(1.0, 2.0, n) if x0 is None else x0
    return Scenario(BeaconConfig(beacons, alpha), Trajectory(kind, params, n), x0,
                    None if bias is None else np.asarray(bias, float), horizon, dt, delta)


THREE = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]


@pytest.fixture
def counterexample():
    return build_counterexample()


@pytest.fixture
def three_beacons():
    return load_bundled("three_beacons")


@pytest.fixture
def circular_scenario():
    return make_scenario([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
