import numpy as np
import pytest

from pydime.diffusion import Architecture, build_model, make_schedule

def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the desk replications')

def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)

@pytest.fixture
def schedule():
    return make_schedule(20, 1e-3, 0.3)

@pytest.fixture
def small_arch():
    return Architecture(hidden=(32, 32), time_dim=8)

@pytest.fixture
def small_model(schedule, small_arch):
    return build_model(small_arch, (4, 4, 1), schedule, seed=1)

@pytest.fixture
def rng():
    return np.random.default_rng(1234)
