import numpy as np
import pytest

from kdvcorr.spectral import make_grid


@pytest.fixture
def grid2pi():
    return make_grid(64, 2 * np.pi, 0.0)


@pytest.fixture
def beta_grid():
    return make_grid(256, 64.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
