import numpy as np
import pytest

from pairglow import precision


@pytest.fixture
def f64():
    """Run a test in 64-bit verification mode."""
    with precision.use(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
