from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
import torch

from app.core.config import settings
from app.services.dataset import PreprocessedCorpus, preprocess
from app.services.models import (
    CrossModalEncoderConfig,
    EncoderConfig,
    ModelConfig,
    SpeechBackboneConfig,
    VisionBackboneConfig,
)
from app.services.synthetic_corpus import SyntheticCorpusSpec, write_synthetic_corpus
from app.services.training import TrainConfig
from app.services.windowing import WindowingConfig

TINY_BUFFERS = (0, 500)


def tiny_model_config(variant: str = "early", **overrides) -> ModelConfig:
    d = 16
    cfg = ModelConfig(
        variant=variant,
        embed_dim=d,
        vision=VisionBackboneConfig(blocks=[(3, 8, 3, 1), (8, 16, 3, 1)], output_dim=d),
        speech=SpeechBackboneConfig(channels=(4, 8), convs_per_block=(1, 1), output_dim=d),
        encoder=EncoderConfig(d_model=d, n_heads=2, n_layers=1, ff_dim=32, dropout=0.0),
        early_encoder=EncoderConfig(d_model=2 * d, n_heads=2, n_layers=1, ff_dim=64, dropout=0.0),
        cross=CrossModalEncoderConfig(d_model=d, n_heads=2, n_self_layers=1, n_cross_layers=1, ff_dim=32,
                                      dropout=0.0),
    )
    return replace(cfg, **overrides)


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(batch_size=4, max_epochs=2, warmup_epochs=1, peak_lr=1e-3, plateau_patience=2, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def tiny_spec(**overrides) -> SyntheticCorpusSpec:
    values = dict(n_dialogues=5, dialogue_duration_s=12.0, strokes_per_minute=30.0, distractors_per_minute=10.0,
                  seed=3)
    values.update(overrides)
    return SyntheticCorpusSpec(**values)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    """Five 12 s synthetic dialogues with two speakers each, preprocessed for buffers 0 and 500 ms."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = write_synthetic_corpus(tiny_spec(), root / "corpus")
    preprocess(manifest, root / "cache", WindowingConfig(), TINY_BUFFERS, settings.JOINT_TABLE, jobs=1)
    return root


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_dir) -> PreprocessedCorpus:
    return PreprocessedCorpus.open(tiny_corpus_dir / "cache")
