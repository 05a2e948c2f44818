import numpy as np
import pytest

from ribpoint.synth import PhantomConfig, generate_phantom
from ribpoint.volume import BinaryMask, Volume


def small_phantom_config(**overrides) -> PhantomConfig:
    """A 96^3 phantom with radii scaled to the smaller grid; fast to render."""
    base = dict(dims=(96, 96, 96), rib_radius_mm=2.0, vertebra_radius_mm=4.0)
    base.update(overrides)
    return PhantomConfig(**base)


@pytest.fixture(scope="session")
def default_phantom():
    """The full-size default phantom shared by accuracy-sensitive tests."""
    return generate_phantom(PhantomConfig(), seed=7)


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(small_phantom_config(), seed=3)


def random_mask(shape, density, seed) -> BinaryMask:
    g = np.random.default_rng(seed)
    bits = g.random(shape[::-1]) < density
    return BinaryMask(shape, (1.0, 1.0, 1.0), bits)


def make_volume(hu: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Volume:
    hu = np.asarray(hu, dtype=np.int16)
    nz, ny, nx = hu.shape
    return Volume((nx, ny, nz), spacing, hu)
