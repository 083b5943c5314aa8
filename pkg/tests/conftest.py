import numpy as np
import pytest

from glora import tensor as T


@pytest.fixture(autouse=True)
def f64():
    """Property checks run in 64-bit; tests needing f32 switch locally."""
    with T.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
