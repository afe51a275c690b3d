import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("default", deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running multi-seed checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_config():
    """Two users, one target, a 2x2 Tx array: fast enough for solver-backed tests."""
    from config import get_default_config
    return get_default_config().with_overrides(
        n_tx=2, n_tz=2, n_rx=3, n_rz=2, K=2, L=1, N_s=2, F=20,
        max_sca_epochs=4, max_bfgs_epochs=10, max_ao_epochs=4, randomization_samples=30,
    )


@pytest.fixture
def small_scenario(small_config):
    from scenario import build_scenario
    return build_scenario(small_config, seed=3)


@pytest.fixture
def small_channels(small_scenario):
    from channel import build_channels
    s = small_scenario
    return build_channels(s.placement, s.tx, s.rx)
