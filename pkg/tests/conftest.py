import numpy as np
import pytest

from ifblend.data import generate_synthetic, SyntheticSceneSpec
from ifblend.model import ModelConfig

SMALL_MODEL = dict(stages=2, base_channels=8, channel_cap=32, window_size=4, gcb_depth=1)


@pytest.fixture
def small_model_cfg():
    return ModelConfig(**SMALL_MODEL)


@pytest.fixture
def tiny_dataset():
    """Eight deterministic 32x32 synthetic pairs."""
    return [
        generate_synthetic(SyntheticSceneSpec(seed=200 + i, size=(32, 32)))
        for i in range(8)
    ]


@pytest.fixture
def tiny_dataset_64():
    """Eight deterministic 64x64 synthetic pairs (the overfit fixture)."""
    return [
        generate_synthetic(SyntheticSceneSpec(seed=100 + i, size=(64, 64)))
        for i in range(8)
    ]
