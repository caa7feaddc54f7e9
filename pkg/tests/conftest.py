import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from petreg.volume import Volume

settings.register_profile(
    "petreg", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("petreg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def blob_volume(n=24, spacing=(1.0, 1.0, 1.0), centre=(0.0, 0.0, 0.0), semi=(6.0, 4.0, 3.0), origin=None):
    """Smooth anisotropic Gaussian blob plus a weaker offset blob, centred grid."""
    if origin is None:
        origin = tuple(-(n - 1) * s / 2 for s in spacing)
    v = Volume(np.zeros((n, n, n)), spacing, origin)
    p = v.world_grid() - np.asarray(centre)
    a = np.exp(-0.5 * np.sum((p / np.asarray(semi)) ** 2, axis=1))
    b = 0.6 * np.exp(-0.5 * np.sum(((p - np.array([3.0, -2.0, 1.0])) / 2.5) ** 2, axis=1))
    return v.with_data((a + b).reshape(n, n, n))
