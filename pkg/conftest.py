import os
import sys

import pytest

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))
SRC_DIR = os.path.join(ROOT_DIR, "src")
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the trend reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: minutes-long trend reproduction, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
