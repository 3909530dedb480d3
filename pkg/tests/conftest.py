import numpy as np
import pytest


def gaussian_blobs(n, d, n_blobs, seed, spread=0.05, box=1.0):
    """Clustered synthetic data: n points around n_blobs uniform centers."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-box, box, size=(n_blobs, d))
    assign = rng.integers(n_blobs, size=n)
    points = centers[assign] + rng.normal(0.0, spread, size=(n, d))
    return points.astype(np.float32)


@pytest.fixture
def blobs_16d():
    return gaussian_blobs(6000, 16, 24, seed=11)
