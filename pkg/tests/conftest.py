import numpy as np
import pytest

from freshann import kernels
from freshann.core import VectorSet


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def mixture(n, dim, clusters=8, seed=0, salt=0):
    from freshann.bench import MixtureSampler

    return MixtureSampler(dim, clusters, seed).sample(n, salt)


@pytest.fixture
def small_set(rng):
    return VectorSet.from_array(rng.normal(size=(300, 12)).astype(np.float32))
