import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trimkv.model import ModelConfig, init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(seed=0, n_layers=2, n_heads=2, head_dim=8, ffn_dim=32, vocab=64):
    return ModelConfig(
        n_layers=n_layers,
        n_heads=n_heads,
        head_dim=head_dim,
        ffn_dim=ffn_dim,
        vocab_size=vocab,
        seed=seed,
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_weights(tiny_cfg):
    return init_weights(tiny_cfg)
