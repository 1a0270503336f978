import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wmtract.phantom import PhantomSpec

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """16^3 phantom with a short arc, fast enough for training smoke tests."""
    return PhantomSpec(dims=(16, 16, 16), start=(3.0, 4.0, 8.0), end=(12.0, 4.0, 8.0), bulge=(0.0, 6.0, 0.0), radius=2.0)
