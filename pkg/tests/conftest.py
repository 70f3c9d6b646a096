"""Pytest configuration and fixtures"""
import pytest
import torch

from src.attacks import ClassifierHandle
from src.classifier import LinearClassifier, make_handle
from src.config_manager import (
    AttackConfig, DataConfig, EvalConfig, PurifierConfig, RunConfig, TrainConfig
)
from src.data_pipeline import DatasetHandle, load_from_config
from src.database import Database
from src.purifier import IdentityPurifier, MaskedAutoencoderPurifier, build_purifier


def tiny_purifier_config() -> PurifierConfig:
    """8x8 input, ps = 2, one block on each side"""
    return PurifierConfig(
        patch_size=2,
        in_chans=3,
        input_hw=(8, 8),
        embed_dim=8,
        depth=1,
        num_heads=2,
        decoder_embed_dim=8,
        decoder_depth=1,
        decoder_num_heads=2,
        mlp_ratio=2.0,
    )


def tiny_data_config() -> DataConfig:
    return DataConfig(dataset="synthetic", n_classes=4, n_per_class=16, resolution=(8, 8),
                      seed=7, classifier_epochs=1)


def tiny_model(seed: int = 0, dtype: torch.dtype = torch.float64) -> MaskedAutoencoderPurifier:
    torch.manual_seed(seed)
    return build_purifier(tiny_purifier_config(), dtype=dtype).eval()


def linear_classifier(num_classes: int = 4, in_features: int = 3 * 8 * 8, seed: int = 0,
                      dtype: torch.dtype = torch.float32) -> ClassifierHandle:
    torch.manual_seed(seed)
    model = LinearClassifier(num_classes, in_features)
    return make_handle(model, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25), num_classes).to(dtype)


@pytest.fixture
def db():
    """Create an in-memory database for testing"""
    database = Database("sqlite:///:memory:")
    yield database


@pytest.fixture
def purifier_config() -> PurifierConfig:
    return tiny_purifier_config()


@pytest.fixture
def model64() -> MaskedAutoencoderPurifier:
    """Tiny float64 purifier for exact identities and gradient checks"""
    return tiny_model(seed=0, dtype=torch.float64)


@pytest.fixture
def model32() -> MaskedAutoencoderPurifier:
    return tiny_model(seed=0, dtype=torch.float32)


@pytest.fixture
def identity_purifier() -> IdentityPurifier:
    return IdentityPurifier(patch_size=2, in_chans=3)


@pytest.fixture
def images64() -> torch.Tensor:
    generator = torch.Generator().manual_seed(1)
    return torch.rand(2, 3, 8, 8, generator=generator, dtype=torch.float64)


@pytest.fixture(scope="session")
def synthetic_handle() -> DatasetHandle:
    """64 synthetic 8x8 images in 4 classes"""
    return load_from_config(tiny_data_config())


@pytest.fixture
def classifier() -> ClassifierHandle:
    """Linear classifier over 8x8 RGB images"""
    return linear_classifier()


@pytest.fixture
def run_config(tmp_path) -> RunConfig:
    """Smallest complete run: one short epoch, two-step attacks, one eval seed"""
    attack = AttackConfig(epsilon=8 / 255, steps=2, step_size=4 / 255)
    return RunConfig(
        model=tiny_purifier_config(),
        train=TrainConfig(epochs=1, batch_size=8, max_steps_per_epoch=2, warmup_steps=0,
                          finetune_epochs=1, lora_rank=2, lora_alpha=2.0, progress=False),
        attack=attack,
        data=tiny_data_config(),
        eval=EvalConfig(n_runs=1, batch_size=16, max_batches=1, ssim_window=3, attack=attack),
        out_dir=str(tmp_path / "run"),
        device="cpu",
    )
