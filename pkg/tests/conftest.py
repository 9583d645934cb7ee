import numpy as np
import pytest

from pointbox import ImageGrid


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def noise_image(rng):
    data = np.clip(rng.normal(120, 40, size=(12, 14, 3)), 0, 255).astype(np.uint8)
    return ImageGrid(data)


@pytest.fixture
def flat_image():
    return ImageGrid(np.full((8, 9, 3), 100, dtype=np.uint8))
