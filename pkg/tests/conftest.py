import numpy as np
import pytest

from localfk.geometry import build_domain

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


SQUARE = {"type": "box", "lower": [0, 0], "upper": [1, 1]}
CUBE = {"type": "box", "lower": [0, 0, 0], "upper": [1, 1, 1]}
DISK = {"type": "disk", "center": [0, 0], "radius": 1.0}
LSHAPE = {"type": "lshape", "size": 1.0}


@pytest.fixture(scope="session")
def square16():
    return build_domain(SQUARE, 1 / 16)


@pytest.fixture(scope="session")
def disk32():
    return build_domain(DISK, 1 / 32)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)
