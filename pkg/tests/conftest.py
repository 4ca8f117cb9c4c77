import numpy as np
import pytest

from guidelab.config import DEFAULT_MIXTURE
from guidelab.mixture import GaussianMixture


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def benchmark():
    return GaussianMixture.from_dict(DEFAULT_MIXTURE)


@pytest.fixture
def sym1d():
    return GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[[1.0]], [[1.0]]])
