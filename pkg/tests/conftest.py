import numpy as np
import pytest

from deformad import numeric as nm


@pytest.fixture
def fp64():
    """Run the test body in 64-bit compute mode."""
    with nm.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
