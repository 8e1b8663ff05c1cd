import numpy as np
import pytest

from sparsezo import Batch, LogisticModel, QuadraticModel

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def logistic_instance():
    """Small softmax regression: 4 features, 4 classes, bias -> d = 20."""
    r = np.random.default_rng(7)
    model = LogisticModel(4, 4)
    batch = Batch(r.standard_normal((32, 4)), r.integers(0, 4, 32))
    w = 0.3 * r.standard_normal(model.dim)
    return model, batch, w


@pytest.fixture
def quadratic():
    return QuadraticModel.random(20, mu=0.5, L=2.0, center=np.linspace(-1, 1, 20), seed=3)
