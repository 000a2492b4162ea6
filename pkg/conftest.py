import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "tests"))

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the benchmark reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute benchmark reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def data_dir():
    return DATA_DIR
