import numpy as np
import pytest

from mfglearn.equilibrium import solve_stationary_equilibrium
from mfglearn.model import ModelParams, StateGrid


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def grid(params):
    return StateGrid.build(params)


@pytest.fixture(scope="session")
def small_grid(params):
    return StateGrid.build(params, n_a=100)


@pytest.fixture(scope="session")
def steady(grid, params):
    return solve_stationary_equilibrium(grid, params)


@pytest.fixture(scope="session")
def small_steady(small_grid, params):
    return solve_stationary_equilibrium(small_grid, params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split()[0])):
            terminalreporter.write_line(line)
