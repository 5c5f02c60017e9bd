from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from app.core.config import settings
from app.core.errors import ConfigError
from app.core.experiment import (
    ExperimentConfig,
    SpeechConfig,
    apply_overrides,
    load_experiment,
    parse_override,
)
from app.services.models import FusionVariant


def test_shipped_default_loads():
    cfg = load_experiment()
    assert cfg.evaluation.variants == [v.value for v in FusionVariant]
    assert cfg.windowing.k_folds == 5
    assert cfg.speech.buffer_ms == 500
    assert cfg.models.embed_dim == 256
    assert cfg.output_path.is_absolute()
    assert cfg.output_path == (Path.cwd() / "runs" / "default").resolve()
    assert cfg.fold_indices() == [0, 1, 2, 3, 4]


def test_overrides_are_yaml_values():
    assert parse_override("training.max_epochs=5") == (["training", "max_epochs"], 5)
    assert parse_override("speech.preprocess_buffers=[0, 500]") == (["speech", "preprocess_buffers"], [0, 500])
    assert parse_override("cache_dir=") == (["cache_dir"], None)
    with pytest.raises(ConfigError):
        parse_override("training.max_epochs")
    data = apply_overrides({"training": {"max_epochs": 60}}, ["training.max_epochs=3", "evaluation.folds=[1]"])
    assert data == {"training": {"max_epochs": 3}, "evaluation": {"folds": [1]}}
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.value=2"])


def test_overrides_reach_the_config():
    cfg = load_experiment(overrides=["seed=9", "training.max_epochs=3", "evaluation.folds=[2]"])
    assert cfg.seed == 9
    assert cfg.train_config().seed == 9
    assert cfg.train_config().max_epochs == 3
    assert cfg.fold_indices() == [2]


def test_unknown_key_is_config_error():
    with pytest.raises(ConfigError):
        load_experiment(overrides=["training.bogus=1"])
    with pytest.raises(ConfigError):
        load_experiment(overrides=["training.max_epochs=many"])
    with pytest.raises(ConfigError):
        load_experiment(overrides=["evaluation.folds=[7]"])


def test_relative_paths_resolve_against_the_config_file(tmp_path):
    path = tmp_path / "exp" / "experiment.yaml"
    path.parent.mkdir()
    path.write_text(yaml.safe_dump({"output_dir": "out", "cache_dir": "../cache", "seed": 3}), encoding="utf-8")
    cfg = load_experiment(path)
    assert cfg.output_path == (tmp_path / "exp" / "out").resolve()
    assert cfg.cache_path == (tmp_path / "cache").resolve()
    assert cfg.corpus_dir == cfg.output_path / "corpus"
    assert cfg.manifest_path == cfg.output_path / "corpus" / "manifest.csv"


def test_cache_path_falls_back_to_environment_then_output(tmp_path, monkeypatch):
    cfg = ExperimentConfig(output_dir=str(tmp_path / "out"))
    monkeypatch.setattr(settings, "CACHE_ROOT", None)
    assert cfg.cache_path == tmp_path / "out" / "cache"
    monkeypatch.setattr(settings, "CACHE_ROOT", str(tmp_path / "shared"))
    assert cfg.cache_path == tmp_path / "shared"


def test_dumped_config_reloads_identically(tmp_path):
    cfg = load_experiment(overrides=[f"output_dir={tmp_path / 'out'}", "models.variant=cross"])
    dumped = cfg.dump(tmp_path / "dump")
    assert load_experiment(dumped).to_dict() == cfg.to_dict()


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment(bad)


def test_section_validation():
    with pytest.raises(ConfigError):
        SpeechConfig(buffer_ms=100)
    with pytest.raises(ConfigError):
        SpeechConfig(buffer_ms=250, preprocess_buffers=[0, 500])
    with pytest.raises(ConfigError):
        load_experiment(overrides=["corpus.source=manifest"])
    with pytest.raises(ConfigError):
        load_experiment(overrides=["jobs=0"])
