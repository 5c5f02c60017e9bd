"""
Statistical analysis of speech features and model confidences, plus Grad-CAM
localization maps for the speech backbone.

Analysis windows are the 1-second speech spans of the model windows
(500 ms window + 500 ms buffer), so feature rows and predictions join on window_id.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy import stats

from app.core.errors import ConfigError, ContractError, InputError
from app.services.corpus_io import SAMPLE_RATE_HZ, ManifestEntry, load_audio
from app.services.predictions import PredictionSet
from app.services.models import FusionVariant, GestureDetector
from app.services.speech_features import (
    F0_FRAME_MS,
    FEATURE_NAMES,
    HOP_MS,
    N_MELS,
    SpeechWindowConfig,
    estimate_f0,
    extract_window_audio,
    low_level_features,
    voiced_segment_count,
)
from app.services.windowing import Label

logger = logging.getLogger(__name__)

ANALYSIS_BUFFER_MS = 500
MIN_VOICED_SEGMENTS = 1
MAX_VOICED_SEGMENTS = 9
CLASS_NAMES = {Label.GESTURE: "gesture", Label.NEUTRAL: "neutral"}


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p_value: float
    n1: int
    n2: int
    df: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ContractError(f"p-value {self.p_value} outside [0, 1]")


@dataclass
class AnalysisConfig:
    min_voiced_segments: int = MIN_VOICED_SEGMENTS
    max_voiced_segments: int = MAX_VOICED_SEGMENTS
    max_per_bin: Optional[int] = None
    gradcam_examples: int = 8
    gradcam_layer: int = -1
    models: List[str] = field(default_factory=lambda: ["speech", "vision", "early"])

    def __post_init__(self):
        if not 0 < self.min_voiced_segments <= self.max_voiced_segments:
            raise ConfigError("analysis voiced-segment bins must satisfy 0 < min <= max")
        if self.max_per_bin is not None and self.max_per_bin < 1:
            raise ConfigError("analysis.max_per_bin must be positive")
        for name in self.models:
            try:
                FusionVariant(name)
            except ValueError:
                raise ConfigError(f"analysis.models: unknown variant {name}") from None


def _clip_p(p: float) -> float:
    return 1.0 if not np.isfinite(p) else float(min(max(p, 0.0), 1.0))


# ----------------------------------------------------------------------------------------
# Statistical tests
# ----------------------------------------------------------------------------------------

def welch_t(a: Sequence[float], b: Sequence[float]) -> Optional[StatResult]:
    """Welch's unequal-variance t with Welch-Satterthwaite df; None for degenerate samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        return None
    v1, v2 = a.var(ddof=1) / n1, b.var(ddof=1) / n2
    if v1 + v2 == 0:
        return None
    df = (v1 + v2) ** 2 / (v1 ** 2 / (n1 - 1) + v2 ** 2 / (n2 - 1))
    res = stats.ttest_ind(a, b, equal_var=False)
    return StatResult(float(res.statistic), _clip_p(float(res.pvalue)), n1, n2, float(df))


def spearman(a: Sequence[float], b: Sequence[float]) -> Optional[StatResult]:
    """Rank correlation on average ranks, p from the t approximation; None for constant input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size:
        raise InputError(f"spearman needs paired samples, got {a.size} and {b.size}")
    if a.size < 3:
        raise InputError(f"spearman needs at least 3 pairs, got {a.size}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    res = stats.spearmanr(a, b)
    rho = float(np.clip(res.statistic, -1.0, 1.0))
    return StatResult(rho, _clip_p(float(res.pvalue)), a.size, b.size, float(a.size - 2))


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> StatResult:
    """
    U of sample a (pairs with a > b, ties counting one half), two-sided p from the
    tie-corrected normal approximation with continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 1 or b.size < 1:
        raise InputError("mann_whitney_u needs at least one value per sample")
    with np.errstate(invalid="ignore", divide="ignore"):
        res = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    return StatResult(float(res.statistic), _clip_p(float(res.pvalue)), a.size, b.size)


def compare_confidences(a: PredictionSet, b: PredictionSet) -> StatResult:
    """Mann-Whitney U between two models' gesture confidences on gesture-labelled windows."""
    b = b.aligned_to(a)
    mask = a.labels == int(Label.GESTURE)
    if not mask.any():
        raise InputError("no gesture-labelled windows to compare")
    return mann_whitney_u(a.scores[mask], b.scores[mask])


# ----------------------------------------------------------------------------------------
# Balanced feature samples
# ----------------------------------------------------------------------------------------

@dataclass
class BalancedSampleSet:
    """One row per 1-second analysis window: ids, class, voiced-segment bin and FEATURE_NAMES."""
    frame: pd.DataFrame
    seed: int = 0

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def n_gesture(self) -> int:
        return int((self.frame["class"] == "gesture").sum())

    @property
    def n_neutral(self) -> int:
        return int((self.frame["class"] == "neutral").sum())

    def bin_counts(self) -> pd.DataFrame:
        """(speaker_id, voiced_segments) x class counts."""
        return (self.frame.groupby(["speaker_id", "voiced_segments", "class"]).size()
                .unstack("class", fill_value=0).reindex(columns=["gesture", "neutral"], fill_value=0))

    def feature_values(self, feature: str, cls: Optional[str] = None) -> np.ndarray:
        df = self.frame if cls is None else self.frame[self.frame["class"] == cls]
        values = pd.to_numeric(df[feature], errors="coerce").to_numpy(np.float64)
        return values[np.isfinite(values)]

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.8g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path, seed: int = 0) -> "BalancedSampleSet":
        df = pd.read_csv(path, dtype={"window_id": str, "dialogue_id": str, "speaker_id": str})
        return cls(df, seed)


def _f0_frames_per_window(n_samples: int) -> int:
    frame_len = SAMPLE_RATE_HZ * F0_FRAME_MS // 1000
    hop = SAMPLE_RATE_HZ * HOP_MS // 1000
    return max(n_samples - frame_len, 0) // hop + 1


def _voiced_counts(entry: ManifestEntry, start_frames: Sequence[int], fps: float) -> np.ndarray:
    """Voiced-segment count of each window's 1 s span, read off one F0 pass over the track."""
    audio = load_audio(entry.audio_path, entry.speaker_id)
    voiced = estimate_f0(audio.samples).voiced
    n_frames = _f0_frames_per_window(SpeechWindowConfig(buffer_ms=ANALYSIS_BUFFER_MS).n_samples)
    out = np.zeros(len(start_frames), dtype=np.int64)
    for i, start in enumerate(start_frames):
        first = int(round(1000.0 * start / fps / HOP_MS))
        out[i] = voiced_segment_count(voiced[first:first + n_frames])
    return out


def _window_features(job: Tuple[ManifestEntry, List[int], float]) -> List[Dict[str, Optional[float]]]:
    entry, start_frames, fps = job
    audio = load_audio(entry.audio_path, entry.speaker_id)
    scfg = SpeechWindowConfig(buffer_ms=ANALYSIS_BUFFER_MS)
    rows = []
    for start in start_frames:
        feats = low_level_features(extract_window_audio(audio, start, scfg, fps))
        rows.append({name: feats[name] for name in FEATURE_NAMES})
    return rows


def sample_balanced_windows(corpus, seed: int = 0, cfg: Optional[AnalysisConfig] = None,
                            jobs: int = 1) -> BalancedSampleSet:
    """
    Per speaker and voiced-segment bin (1..9): every gesture window plus an equal number
    of neutral windows drawn without replacement. A bin short of neutral windows keeps
    an equally sized random subset of its gesture windows. Features are computed only
    for the sampled windows.
    """
    cfg = cfg or AnalysisConfig()
    windows = corpus.sequence_windows()
    fps = float(corpus.summary["fps"])
    entries = {e.speaker_id: e for e in corpus.manifest()}

    picked: List[pd.DataFrame] = []
    for s_idx, (speaker, track) in enumerate(sorted(windows.groupby("speaker_id"), key=lambda kv: kv[0])):
        if speaker not in entries:
            raise InputError(f"speaker {speaker} is not in the corpus manifest")
        track = track.assign(voiced_segments=_voiced_counts(entries[speaker], track["start_frame"].tolist(), fps))
        for v in range(cfg.min_voiced_segments, cfg.max_voiced_segments + 1):
            in_bin = track[track["voiced_segments"] == v]
            gesture = in_bin[in_bin["label"] == int(Label.GESTURE)]
            neutral = in_bin[in_bin["label"] == int(Label.NEUTRAL)]
            if gesture.empty:
                continue
            n = min(len(gesture), len(neutral))
            if cfg.max_per_bin is not None:
                n = min(n, cfg.max_per_bin)
            if len(neutral) < len(gesture):
                logger.warning(f"{speaker}: bin {v} has {len(gesture)} gesture but only {len(neutral)} "
                               f"neutral window(s), keeping {n} of each")
            if n == 0:
                continue
            rng = np.random.default_rng([seed, s_idx, v])
            g_rows = gesture.iloc[np.sort(rng.choice(len(gesture), size=n, replace=False))]
            n_rows = neutral.iloc[np.sort(rng.choice(len(neutral), size=n, replace=False))]
            picked += [g_rows, n_rows]

    columns = ["window_id", "dialogue_id", "speaker_id", "start_frame", "label", "voiced_segments"]
    if not picked:
        logger.warning("No gesture windows with voiced speech: balanced sample is empty")
        return BalancedSampleSet(pd.DataFrame(columns=columns + ["class"] + FEATURE_NAMES), seed)
    sample = pd.concat(picked, ignore_index=True)[columns]
    sample = sample.sort_values(["speaker_id", "start_frame"], kind="stable").reset_index(drop=True)
    sample.insert(5, "class", [CLASS_NAMES[Label(int(x))] for x in sample["label"]])

    jobs_list = [(entries[speaker], group["start_frame"].tolist(), fps)
                 for speaker, group in sample.groupby("speaker_id", sort=True)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            feature_rows = [row for rows in pool.map(_window_features, jobs_list) for row in rows]
    else:
        feature_rows = [row for job in jobs_list for row in _window_features(job)]
    features = pd.DataFrame(feature_rows, columns=FEATURE_NAMES, dtype=np.float64)
    sample = pd.concat([sample, features], axis=1)
    logger.info(f"Balanced sample: {len(sample)} windows from {sample['speaker_id'].nunique()} speaker(s)")
    return BalancedSampleSet(sample, seed)


# ----------------------------------------------------------------------------------------
# Tables
# ----------------------------------------------------------------------------------------

def feature_distribution_table(samples: BalancedSampleSet) -> pd.DataFrame:
    """Welch t of every feature, gesture vs neutral windows."""
    rows = []
    for name in FEATURE_NAMES:
        g = samples.feature_values(name, "gesture")
        n = samples.feature_values(name, "neutral")
        res = welch_t(g, n)
        rows.append({
            "feature": name,
            "gesture_mean": float(g.mean()) if g.size else np.nan,
            "neutral_mean": float(n.mean()) if n.size else np.nan,
            "t": res.statistic if res else np.nan,
            "df": res.df if res else np.nan,
            "p": res.p_value if res else np.nan,
            "n_gesture": int(g.size),
            "n_neutral": int(n.size),
        })
    return pd.DataFrame(rows)


def confidence_feature_correlation(predictions: Dict[str, PredictionSet],
                                   samples: BalancedSampleSet) -> pd.DataFrame:
    """Spearman rho and p of each model's gesture confidence against every feature."""
    table = pd.DataFrame({"feature": FEATURE_NAMES})
    for model, preds in predictions.items():
        joined = samples.frame.merge(preds.to_frame()[["window_id", "score"]], on="window_id", how="inner")
        if joined.empty:
            raise InputError(f"predictions of {model} share no window with the feature sample")
        rhos, ps = [], []
        for name in FEATURE_NAMES:
            pair = joined[["score", name]].apply(pd.to_numeric, errors="coerce").dropna()
            res = spearman(pair["score"], pair[name]) if len(pair) >= 3 else None
            rhos.append(res.statistic if res else np.nan)
            ps.append(res.p_value if res else np.nan)
        table[f"{model}_rho"] = rhos
        table[f"{model}_p"] = ps
        logger.info(f"{model}: {len(joined)} window(s) joined with the feature sample")
    return table


# ----------------------------------------------------------------------------------------
# Grad-CAM
# ----------------------------------------------------------------------------------------

class GradCAM:
    """Forward hook on one convolution of the speech backbone; gradient captured on its output."""

    def __init__(self, model: GestureDetector, layer_index: int = -1):
        if model.cfg.fusion != FusionVariant.SPEECH or not hasattr(model, "speech_backbone"):
            raise ContractError(f"Grad-CAM needs a speech-only model, got {model.variant.value}")
        for name, p in model.named_parameters():
            if not torch.isfinite(p).all():
                raise ContractError(f"parameter {name} holds non-finite values")
        convs = model.speech_backbone.conv_layers()
        if not -len(convs) <= layer_index < len(convs):
            raise ConfigError(f"conv layer index {layer_index} out of range for {len(convs)} layers")
        self.model = model
        self.activations: Optional[torch.Tensor] = None
        self.gradients: Optional[torch.Tensor] = None
        self._handle = convs[layer_index].register_forward_hook(self._save)

    def _save(self, module, inp, out):
        self.activations = out
        if out.requires_grad:
            out.register_hook(self._save_grad)

    def _save_grad(self, grad):
        self.gradients = grad

    def close(self) -> None:
        self._handle.remove()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __call__(self, mel: np.ndarray | torch.Tensor, target_class: int = int(Label.GESTURE)) -> np.ndarray:
        x = torch.as_tensor(np.asarray(mel), dtype=next(self.model.parameters()).dtype)
        if x.dim() != 2 or x.shape[0] != N_MELS:
            raise ContractError(f"Grad-CAM input must be ({N_MELS}, T), got {tuple(x.shape)}")
        was_training = self.model.training
        self.model.eval()
        self.model.zero_grad(set_to_none=True)
        with torch.enable_grad():
            logits = self.model(None, x[None, None])
            logits[0, 0, int(target_class)].backward()
        self.model.train(was_training)

        A, dA = self.activations, self.gradients
        weights = dA.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * A).sum(dim=1, keepdim=True))
        cam = F.interpolate(cam, size=tuple(x.shape), mode="bilinear", align_corners=False)[0, 0]
        cam = cam.detach().double().numpy()
        cam = cam - cam.min()
        peak = cam.max()
        return cam / peak if peak > 0 else np.zeros_like(cam)


def grad_cam(model: GestureDetector, mel: np.ndarray | torch.Tensor, target_class: int = int(Label.GESTURE),
             layer_index: int = -1) -> np.ndarray:
    """(64, T) heatmap in [0, 1] for target_class of a speech-only model; the score is the raw logit."""
    with GradCAM(model, layer_index) as cam:
        return cam(mel, target_class)


def region_contrast(heatmap: np.ndarray, mask: np.ndarray) -> Tuple[float, float]:
    """(mean heatmap inside mask, mean outside)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != heatmap.shape:
        raise ContractError(f"mask shape {mask.shape} != heatmap shape {heatmap.shape}")
    if mask.all() or not mask.any():
        raise InputError("region mask must cover part of the heatmap")
    return float(heatmap[mask].mean()), float(heatmap[~mask].mean())


def gradcam_activation_table(model: GestureDetector, items: Iterable[Tuple[str, int, np.ndarray]],
                             layer_index: int = -1) -> pd.DataFrame:
    """Mean gesture heatmap activation of each (window_id, label, mel) item."""
    rows = []
    with GradCAM(model, layer_index) as cam:
        for wid, label, mel in items:
            rows.append({"window_id": wid, "class": CLASS_NAMES[Label(int(label))],
                         "mean_activation": float(cam(mel).mean())})
    return pd.DataFrame(rows, columns=["window_id", "class", "mean_activation"])


def compare_activations(table: pd.DataFrame) -> Optional[StatResult]:
    """Welch t of mean activation, gesture vs neutral windows."""
    return welch_t(table.loc[table["class"] == "gesture", "mean_activation"],
                   table.loc[table["class"] == "neutral", "mean_activation"])
