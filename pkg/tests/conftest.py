import numpy as np
import pytest

from rpmalign.geom import PointCloud


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random proper rotation (QR of a Gaussian matrix)."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_cloud(rng: np.random.Generator, n: int) -> PointCloud:
    pts = rng.normal(size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
