import numpy as np
import pytest

from tscp.synthetic import make_table


@pytest.fixture(scope="session")
def small_table():
    """2000 samples, 10 classes, twice overconfident."""
    return make_table(2000, 10, 2.0, seed=3)


@pytest.fixture(scope="session")
def sweep_table():
    return make_table(6000, 100, 2.0, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
