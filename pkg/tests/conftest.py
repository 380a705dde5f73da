import numpy as np
import pytest

from sparse_gcp import KruskalModel, LossFunction
from sparse_gcp.io import draw_from_model

# Filled by tests/test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def make_poisson_fixture(dims=(5, 4, 3), rank=3, seed=7):
    """Small seeded Poisson tensor with a mix of zeros and nonzeros."""
    rng = np.random.default_rng(seed)
    truth = KruskalModel.random(dims, rank, rng, 0.2, 1.0)
    x = draw_from_model(truth, "poisson", rng)
    model = KruskalModel.random(dims, rank, rng, 0.2, 1.0)
    return x, model


@pytest.fixture
def poisson543():
    return make_poisson_fixture()


@pytest.fixture
def poisson_loss():
    return LossFunction("poisson")


@pytest.fixture
def gaussian_loss():
    return LossFunction("gaussian")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
