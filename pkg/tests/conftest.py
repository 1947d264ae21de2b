"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from mergesim.config import default_config
from mergesim.dynamics import VehicleParams
from mergesim.scenario import RoadNetwork


@pytest.fixture
def params():
    return VehicleParams()


@pytest.fixture
def net():
    return RoadNetwork()


@pytest.fixture
def cfg():
    return default_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one PASS/FAIL line per acceptance criterion after the run."""
    try:
        from test_acceptance import CRITERION_RESULTS
    except ImportError:
        return
    if CRITERION_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_RESULTS,
                           key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
