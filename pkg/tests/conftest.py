import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance check, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Seeded generator, fresh per test."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid(rng):
    """Batch of 2 windows, L=3 steps over a 4x5 grid, one channel."""
    return rng.normal(size=(2, 3, 4, 5, 1))
