import datetime as dt
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from epistate import synthetic
from epistate.core import Country, ModelParams

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def params():
    return ModelParams()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def three_states():
    return Country(("CT", "NY", "NJ"), np.array([3.6e6, 19.5e6, 8.9e6]))


@pytest.fixture(scope="session")
def small_dataset():
    """5 states, 120 days, large epidemics, mobility and policies."""
    return synthetic.dataset(n=5, days=120, seed=4, infected=5000.0)


@pytest.fixture(scope="session")
def closed_dataset():
    return synthetic.dataset(n=3, days=90, seed=8, infected=5000.0, closed=True)


def day(s: str) -> dt.date:
    return dt.date.fromisoformat(s)


def pytest_terminal_summary(terminalreporter):
    from gate import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
