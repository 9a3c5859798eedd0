"""
Shared fixtures: tiny encoder geometry, a small synthetic dataset and run
configurations that train in seconds on CPU.
"""

from pathlib import Path

import pytest
import torch

from app.config import settings
from app.core.model import PromptReIDModel, build_model
from app.data.dataset import ReIDDataset, Sample, TrainingView
from app.data.synthetic import generate_synthetic
from app.models.config import (
    DataConfig,
    EncoderConfig,
    EvalConfig,
    ModelConfig,
    RunConfig,
    Stage1Config,
    Stage2Config,
    SyntheticSpec,
)

# 32 x 16 images, 8 x 8 patches -> 4 x 2 = 8 patch tokens
TINY_ENCODER = dict(
    image_height=32,
    image_width=16,
    patch_size=8,
    patch_stride=8,
    depth=2,
    heads=2,
    mlp_ratio=2,
    token_dim=16,
    shared_dim=8,
    text_depth=1,
    vocab_size=16,
    max_text_len=16,
)


def tiny_spec(**overrides) -> SyntheticSpec:
    fields = dict(
        num_identities=4,
        outfits_per_identity=2,
        images_per_outfit=3,
        cameras=2,
        seed=3,
        image_height=32,
        image_width=16,
    )
    fields.update(overrides)
    return SyntheticSpec(**fields)


def tiny_run_config(**overrides) -> RunConfig:
    """RunConfig sized for unit tests; keyword overrides replace whole sections."""
    fields = dict(
        seed=11,
        encoder=EncoderConfig(**TINY_ENCODER),
        data=DataConfig(synthetic=tiny_spec()),
        stage1=Stage1Config(epochs=2, batch_size=4, base_lr=1e-3),
        stage2=Stage2Config(
            epochs=2,
            ids_per_batch=2,
            images_per_id=2,
            warmup_epochs=1,
            warmup_start_lr=1e-4,
            base_lr=1e-4,
            milestones=[],
        ),
        eval=EvalConfig(batch_size=8),
    )
    fields.update(overrides)
    return RunConfig(**fields)


def model_for(config: RunConfig, view: TrainingView, seed: int = 0) -> PromptReIDModel:
    encoder = config.encoder.with_label_spaces(view.num_identities, view.num_clothes)
    return build_model(encoder, config.model, seed)


def toy_sample(identity: int, clothing: int, split: str = "train", camera: int = 0) -> Sample:
    return Sample(image=torch.zeros(3, 4, 2), identity=identity, clothing=clothing, camera=camera, split=split)


@pytest.fixture
def encoder_config() -> EncoderConfig:
    return EncoderConfig(**TINY_ENCODER, num_identities=4, num_clothes=8)


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig()


@pytest.fixture
def model(encoder_config, model_config) -> PromptReIDModel:
    return build_model(encoder_config, model_config, seed=0)


@pytest.fixture(scope="session")
def synthetic_dataset() -> ReIDDataset:
    return generate_synthetic(tiny_spec())


@pytest.fixture
def run_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture
def training_view(synthetic_dataset) -> TrainingView:
    return synthetic_dataset.training_view()


@pytest.fixture
def registry(tmp_path: Path, monkeypatch):
    """Point the run registry and default output root into tmp_path."""
    url = f"sqlite:///{tmp_path / 'registry.db'}"
    monkeypatch.setattr(settings, "database_url", url)
    monkeypatch.setattr(settings, "output_root", str(tmp_path / "runs"))
    return url
