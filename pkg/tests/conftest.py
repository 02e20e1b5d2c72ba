import numpy as np
import pytest
from hypothesis import settings

from nearopt.controls import ControlPair, RegularControl, SingularControl
from nearopt.forward import simulate
from nearopt.noise import sample_noise
from nearopt.problem import TimeGrid, get_problem

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")

EPS = 0.04
U_EPS = 1.0 - np.sqrt(EPS)


@pytest.fixture(scope="session")
def grid100():
    return TimeGrid(0.0, 1.0, 100)


@pytest.fixture(scope="session")
def noise_1e4(grid100):
    return sample_noise(grid100, 10_000, 1, seed=1)


@pytest.fixture(scope="session")
def example1():
    return get_problem("example1", epsilon=EPS)


@pytest.fixture(scope="session")
def unit_ramp(grid100):
    return SingularControl.ramp(grid100, 1.0)


@pytest.fixture(scope="session")
def candidate(grid100, unit_ramp):
    return ControlPair(RegularControl.constant(grid100, U_EPS), unit_ramp)


@pytest.fixture(scope="session")
def candidate_states(example1, candidate, noise_1e4):
    return simulate(example1, candidate, noise_1e4)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
