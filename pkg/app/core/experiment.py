"""
Experiment configuration: one YAML file drives every stage.

Relative paths in the file are resolved against the file's directory. CLI flags
only override keys of this structure (``--set training.max_epochs=5``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from app.core.config import settings
from app.core.errors import ConfigError
from app.core.schema import from_plain, to_plain
from app.services.analysis import AnalysisConfig
from app.services.models import FusionVariant, ModelConfig
from app.services.speech_features import ALLOWED_BUFFERS_MS
from app.services.synthetic_corpus import SyntheticCorpusSpec
from app.services.training import TrainConfig
from app.services.windowing import WindowingConfig

logger = logging.getLogger(__name__)

CONFIG_FILENAME = "config.yaml"


@dataclass
class CorpusConfig:
    source: str = "synthetic"
    # real corpus manifest; ignored for synthetic corpora
    manifest: Optional[str] = None
    # where `synth` writes; defaults to <output_dir>/corpus
    directory: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"corpus.source must be 'synthetic' or 'manifest', got {self.source!r}")
        if self.source == "manifest" and not self.manifest:
            raise ConfigError("corpus.manifest is required when corpus.source is 'manifest'")


@dataclass
class SpeechConfig:
    buffer_ms: int = 500
    preprocess_buffers: List[int] = field(default_factory=lambda: list(ALLOWED_BUFFERS_MS))

    def __post_init__(self):
        for b in [self.buffer_ms, *self.preprocess_buffers]:
            if b not in ALLOWED_BUFFERS_MS:
                raise ConfigError(f"speech buffers must be one of {ALLOWED_BUFFERS_MS}, got {b}")
        if self.buffer_ms not in self.preprocess_buffers:
            raise ConfigError(f"speech.buffer_ms {self.buffer_ms} is not among speech.preprocess_buffers")


@dataclass
class EvaluationConfig:
    variants: List[str] = field(default_factory=lambda: [v.value for v in FusionVariant])
    buffers_ms: List[int] = field(default_factory=lambda: [500])
    folds: Optional[List[int]] = None
    threshold: float = 0.5
    batch_size: int = 16
    baseline_seed: int = 0

    def __post_init__(self):
        for v in self.variants:
            try:
                FusionVariant(v)
            except ValueError:
                raise ConfigError(f"evaluation.variants: unknown variant {v!r}") from None
        for b in self.buffers_ms:
            if b not in ALLOWED_BUFFERS_MS:
                raise ConfigError(f"evaluation.buffers_ms must be drawn from {ALLOWED_BUFFERS_MS}, got {b}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("evaluation.threshold must lie in (0, 1)")


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    cache_dir: Optional[str] = None
    jobs: Optional[int] = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    synthetic: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    windowing: WindowingConfig = field(default_factory=WindowingConfig)
    speech: SpeechConfig = field(default_factory=SpeechConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        folds = self.evaluation.folds
        if folds is not None and any(not 0 <= f < self.windowing.k_folds for f in folds):
            raise ConfigError(f"evaluation.folds must lie in [0, {self.windowing.k_folds})")

    # ---- derived paths -------------------------------------------------------------
    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def corpus_dir(self) -> Path:
        return Path(self.corpus.directory) if self.corpus.directory else self.output_path / "corpus"

    @property
    def manifest_path(self) -> Path:
        if self.corpus.source == "manifest":
            return Path(self.corpus.manifest)
        return self.corpus_dir / "manifest.csv"

    @property
    def cache_path(self) -> Path:
        """config cache_dir, then GESTURE_CACHE_ROOT, then <output_dir>/cache."""
        if self.cache_dir:
            return Path(self.cache_dir)
        if settings.CACHE_ROOT:
            return Path(settings.CACHE_ROOT)
        return self.output_path / "cache"

    @property
    def n_jobs(self) -> int:
        return self.jobs if self.jobs is not None else max(settings.JOBS, 1)

    def fold_indices(self) -> List[int]:
        return list(self.evaluation.folds) if self.evaluation.folds is not None else list(range(self.windowing.k_folds))

    def train_config(self) -> TrainConfig:
        """Training section with the experiment seed applied."""
        return replace(self.training, seed=self.seed)

    def model_config(self, variant: FusionVariant | str) -> ModelConfig:
        return self.models.with_variant(variant)

    # ---- serialization ---------------------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return to_plain(self)

    def dump(self, out_dir: str | Path) -> Path:
        """Write the resolved config verbatim into out_dir."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / CONFIG_FILENAME
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return path


PATH_KEYS = (("output_dir",), ("cache_dir",), ("corpus", "manifest"), ("corpus", "directory"))


def parse_override(item: str) -> tuple[List[str], Any]:
    """'a.b.c=value' -> (['a', 'b', 'c'], YAML-parsed value)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {item!r} names no key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: {e}") from e
    return parts, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        parts, value = parse_override(item)
        node = data
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
            node = child
        node[parts[-1]] = value
    return data


def _resolve_paths(data: Dict[str, Any], base_dir: Path) -> None:
    for path in PATH_KEYS:
        node = data
        for p in path[:-1]:
            node = node.get(p) if isinstance(node, dict) else None
            if node is None:
                break
        if not isinstance(node, dict) or not node.get(path[-1]):
            continue
        value = Path(str(node[path[-1]])).expanduser()
        node[path[-1]] = str(value if value.is_absolute() else (base_dir / value).resolve())


def load_experiment(path: str | Path | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Parse, override, resolve paths and validate; the shipped default is used without a path."""
    path = Path(path) if path else Path(settings.DEFAULT_EXPERIMENT)
    if not path.exists():
        raise ConfigError(f"experiment config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    data = apply_overrides(data, overrides)
    data.setdefault("output_dir", ExperimentConfig.output_dir)
    # the shipped default resolves against the working directory
    base_dir = Path.cwd() if path.resolve() == Path(settings.DEFAULT_EXPERIMENT).resolve() else path.resolve().parent
    _resolve_paths(data, base_dir)
    config = from_plain(ExperimentConfig, data)
    logger.debug(f"Loaded experiment config {path} ({len(overrides)} override(s))")
    return config
