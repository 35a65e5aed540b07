import numpy as np
import pytest

from bitglow import fixtures


@pytest.fixture(scope="session")
def iris_a():
    return fixtures.build("iris_a")


@pytest.fixture(scope="session")
def iris_b():
    return fixtures.build("iris_b")


@pytest.fixture(scope="session")
def mnist():
    return fixtures.build("mnist")


@pytest.fixture(scope="session")
def mnist_deep():
    return fixtures.build("mnist_deep")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
