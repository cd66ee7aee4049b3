"""
Shared fixtures for the test suite.

Acceptance-scale runs are marked ``slow`` and only run with --runslow.
"""
import numpy as np
import pytest

from src.components.model import Dataset, Observation, Theta
from src.components.simstudy import builtin_setting, generate_dataset
from src.utils.config import FitConfig
from src.utils.numerics import RngStream


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def theta1():
    """Setting 1 truth"""
    return Theta.from_sigma_scale(6.4, -0.5, -0.5, [0.5], [0.5], 0.7, 0.5)


@pytest.fixture
def tiny_data():
    """Two subjects, one covariate each side, zeros and positives mixed"""
    return Dataset(
        (
            ("A", (Observation(0, 10, (0.0,), (0.0,), 1), Observation(3, 10, (0.0,), (0.0,), 2),
                   Observation(7, 12, (0.0,), (0.0,), 3))),
            ("B", (Observation(5, 20, (1.0,), (1.0,), 1), Observation(0, 8, (1.0,), (1.0,), 2))),
        ),
        dim_x=1,
        dim_z=1,
    )


@pytest.fixture
def small_data():
    """Setting 1 data with N=6, T=4"""
    data, _ = generate_dataset(builtin_setting(1, n_subjects=6, t_per_subject=4), RngStream(7))
    return data


@pytest.fixture
def quick_config():
    return FitConfig(chains=2, k1=15, k2=10, seed=11, log_every=1000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
