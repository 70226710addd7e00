import numpy as np
import pytest

from twolevel.corpus import GeneratorConfig, generate_synthetic


@pytest.fixture(scope="session")
def tiny_corpus():
    """24 videos x 6 clips, 4 intents, low noise; shared across fast tests."""
    cfg = GeneratorConfig(
        num_videos=24,
        clips_per_video=6,
        num_intents=4,
        actions_per_intent=3,
        frames_per_clip=3,
        frame_feature_dim=8,
        latent_dim=4,
    )
    return generate_synthetic(cfg, seed=11, split="train")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
