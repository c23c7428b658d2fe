import numpy as np
import pytest

from voximage.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def rng2():
    return make_rng(99)


def assert_allclose(actual, expected, rtol=1e-12, atol=1e-12):
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=atol)
