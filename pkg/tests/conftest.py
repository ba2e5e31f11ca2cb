import numpy as np
import pytest

from iconprobe.geometry import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def small_volume(rng):
    """Random 8x8x8 volume with centered origin."""
    return Volume(rng.random((8, 8, 8)), (1.0, 1.0, 1.0), (-3.5, -3.5, -3.5))


@pytest.fixture
def blob_pair():
    """Two smooth blobs offset from each other, 16^3, centered grids."""

    def blob(center, shape=(16, 16, 16)):
        n = np.asarray(shape, float)
        origin = tuple(-(n - 1) / 2.0)
        idx = np.indices(shape).reshape(3, -1).T + np.asarray(origin)
        d = np.linalg.norm((idx - np.asarray(center)) / 4.0, axis=1)
        data = np.clip(1.0 - d, 0.0, 1.0) ** 2
        return Volume(data.reshape(shape), (1.0, 1.0, 1.0), origin)

    return blob((1.5, -1.0, 0.5)), blob((-1.0, 2.0, -0.5))
