import numpy as np
import pytest
import torch

from diffpose.config import ModelConfig, from_flat

TINY = {
    "image_size": [32, 16],
    "patch_size": 8,
    "embed_dim": 16,
    "num_heads": 2,
    "frame_layers": 1,
    "temporal_layers": 1,
    "cond_channels": 16,
    "level_channels": [16, 8, 8],
    "heatmap_hidden": 8,
    "fused_channels": 8,
    "step_embed_dim": 16,
    "num_joints": 4,
    "delta": 1,
}


@pytest.fixture
def tiny_run():
    return from_flat(dict(TINY), env=False)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in TINY.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
