"""Shared fixtures: small volumes and phantoms sized for fast unit tests."""

import numpy as np
import pytest

from sparseseg.phantom import PhantomConfig, generate_phantom
from sparseseg.volume import LabelVolume, Volume


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def small_volume():
    """A 12x10x8 volume whose value encodes the voxel's flat index."""
    dims = (12, 10, 8)
    n = dims[0] * dims[1] * dims[2]
    return Volume(dims, (2.0, 2.0, 2.0), np.arange(n, dtype=np.float32))


@pytest.fixture(scope="session")
def small_labels():
    dims = (12, 10, 8)
    n = dims[0] * dims[1] * dims[2]
    labels = (np.arange(n) % 4).astype(np.int32)
    return LabelVolume(dims, (2.0, 2.0, 2.0), labels, 4)


@pytest.fixture(scope="session")
def tiny_phantom():
    """24^3 at 2 mm: a 4x4x4 query grid, fast to segment end to end."""
    return generate_phantom(PhantomConfig(dims=(24, 24, 24), seed=11))


@pytest.fixture(scope="session")
def standard_phantom():
    """The full 96^3 at 2 mm geometry used by the desk-scale criteria."""
    return generate_phantom(PhantomConfig(seed=5))
