import numpy as np
import pytest

from plumeplace.plume import NoiseModel, PlumeParams, SourceField


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def box():
    return np.array([-25.0, -25.0]), np.array([25.0, 25.0])


@pytest.fixture
def field3():
    return SourceField(np.array([[-10.0, 15.0], [0.0, 12.0], [8.0, 18.0]]), 1.0)


@pytest.fixture
def params(box):
    return PlumeParams.for_domain(1.0, *box)


@pytest.fixture
def noise():
    return NoiseModel(0.01)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
