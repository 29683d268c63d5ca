import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

from vamae.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest config exercising every architectural piece (16x16, dims 8)."""
    return ModelConfig(
        image_size=16,
        patch_size=8,
        encoder_depth=1,
        encoder_dim=8,
        encoder_heads=2,
        decoder_depth=1,
        decoder_dim=8,
        decoder_heads=2,
        head_hidden_dims=(8,),
    )


@pytest.fixture
def desk_config():
    return ModelConfig()
