import numpy as np
import pytest

from adaptcd.vit import ViTConfig


@pytest.fixture
def tiny_cfg():
    return ViTConfig(image_size=32, patch_size=8, depth=2, dim=32, heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frames(rng, batch, size, frames=2):
    return rng.uniform(0.0, 1.0, size=(batch, frames, 3, size, size))
