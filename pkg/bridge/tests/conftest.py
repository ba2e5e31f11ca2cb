import numpy as np
import pytest

from iconprobe.geometry import Volume, write_volume


@pytest.fixture
def rng():
    return np.random.default_rng(20240812)


def make_blob_volume(rng, shape=(32, 32, 32), spacing=1.0):
    n = np.asarray(shape, float)
    origin = tuple(-(n - 1) / 2.0 * spacing)
    idx = np.indices(shape).reshape(3, -1).T * spacing + np.asarray(origin)
    center = rng.uniform(-4.0, 4.0, 3)
    radii = rng.uniform(6.0, 9.0, 3)
    d = np.linalg.norm((idx - center) / radii, axis=1)
    data = 1.0 / (1.0 + np.exp((d - 1.0) * 7.0))
    data = np.clip(data + rng.normal(0, 0.01, data.shape), 0.0, 1.0)
    return Volume(data.astype(np.float32).astype(np.float64).reshape(shape), (spacing,) * 3, origin)


@pytest.fixture
def volume_dir(tmp_path, rng):
    """Eight toy scans written with the consumer-side writer."""
    paths = {}
    for i in range(8):
        pid = f"P{i:03d}"
        vol = make_blob_volume(rng)
        path = tmp_path / f"vol_{pid}_right_000.ipvol"
        write_volume(vol, path)
        paths[(pid, "right", 0)] = path
    return tmp_path, paths


@pytest.fixture
def seg_dataset(tmp_path, rng):
    """Paired image/labels volumes for the specialist U-Net."""
    ddir = tmp_path / "segdata"
    ddir.mkdir()
    for i in range(4):
        vol = make_blob_volume(rng)
        labels = np.zeros(vol.shape)
        labels[vol.data > 0.6] = 1.0
        labels[vol.data > 0.85] = 2.0
        labels[:, : vol.shape[1] // 2][vol.data[:, : vol.shape[1] // 2] > 0.6] = 3.0
        labels[8:12, 8:12, 8:12] = 4.0
        write_volume(vol, ddir / f"case_{i:03d}_img.ipvol")
        write_volume(Volume(labels, vol.spacing, vol.origin), ddir / f"case_{i:03d}_seg.ipvol")
    return ddir
