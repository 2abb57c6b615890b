"""
Shared pytest options and fixtures
"""
import pytest

from network.datasets import blobs, load_bundled, split


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='Run minute-scale statistical tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def blob_split():
    """120 separable points, 90 train / 30 test"""
    return split(blobs(n_samples=120, seed=3), test_fraction=0.25, seed=0)


@pytest.fixture(scope='session')
def iris_split():
    return split(load_bundled('iris'), test_fraction=0.2, seed=0)
