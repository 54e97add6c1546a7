import numpy as np
import pytest

from mitodann import tensor as T


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
