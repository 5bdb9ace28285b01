import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_addoption(parser):
    parser.addoption(
        "--skip-experiments", action="store_true", default=False,
        help="skip the long desk-scale training experiments in the "
             "acceptance suite",
    )
