import pytest

from src.config import ModelConfig, SynthConfig, TrainConfig
from src.data import generate_synthetic_dataset
from src.utils import configure_determinism


@pytest.fixture(scope="session", autouse=True)
def deterministic_torch():
    """Same kernel settings `train` uses, so repeated runs in one session match bitwise."""
    configure_determinism()


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Two 16x16 domains; small enough to train for a few hundred steps in a test."""
    return ModelConfig(
        num_domains=2,
        image_size=16,
        content_channels=8,
        num_res_blocks=1,
        style_dim=4,
        mlp_dim=16,
        disc_channels=4,
        disc_layers=3,
        disc_scales=1,
    )


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(lr=1e-3, iterations=4, seed=3, checkpoint_every=0, log_every=1)


@pytest.fixture
def tiny_synth_config() -> SynthConfig:
    return SynthConfig(num_domains=2, image_size=16, num_train=6, num_test=3, seed=5)


@pytest.fixture
def tiny_dataset(tiny_synth_config):
    return generate_synthetic_dataset(tiny_synth_config)


@pytest.fixture
def synth3_dataset():
    return generate_synthetic_dataset(SynthConfig(num_domains=3, image_size=16, num_train=5, num_test=4, seed=1))
