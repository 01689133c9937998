import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)

settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def tiny_denoiser_cfg():
    from pddpm.denoiser import DenoiserConfig

    return DenoiserConfig(
        channel_dims=(8, 16), residual_blocks_per_level=1, time_embed_dim=16
    )


@pytest.fixture(scope="session")
def tiny_train_cfg():
    from pddpm.noise import NoiseConfig
    from pddpm.pipeline import TrainConfig

    return TrainConfig(
        learning_rate=1e-3,
        batch_size=4,
        max_epochs=2,
        steps_per_epoch=3,
        T=50,
        t_test=25,
        noise=NoiseConfig(kind="gaussian"),
        patch_mode="fixed",
        loss_mode="patch",
        patch_size=(16, 16),
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_volumes():
    from pddpm.data import generate_phantom

    return [generate_phantom(s, size=(4, 32, 32)) for s in range(3)]


def rand_slice(rng: np.random.Generator, C=1, H=16, W=16) -> np.ndarray:
    return rng.standard_normal((C, H, W)).astype(np.float32)
