import numpy as np
import pytest

from ssllab.data import PixelStats, generate_synthetic, make_splits
from ssllab.model import EmaParams, EncoderConfig, build_encoder

RAW = PixelStats(0.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest legal encoder: one block, 8x8 input, 3 classes."""
    return EncoderConfig(input_channels=1, input_size=8, channel_widths=(4,), num_classes=3)


@pytest.fixture
def tiny_params(tiny_config):
    return build_encoder(tiny_config, seed=7)


@pytest.fixture
def tiny_teacher(tiny_params):
    return EmaParams.from_student(tiny_params)


@pytest.fixture
def toy_batches(rng):
    """2 labeled + 4 unlabeled 8x8 images in [0, 1]."""
    x_l = rng.random((2, 1, 8, 8)).astype(np.float32)
    y_l = np.array([0, 2], dtype=np.int64)
    x_u = rng.random((4, 1, 8, 8)).astype(np.float32)
    return (x_l, y_l), x_u


@pytest.fixture(scope="session")
def small_splits():
    ds = generate_synthetic(40, 3, 16, seed=5)
    return make_splits(ds, 4, validation_fraction=0.2, seed=3)
