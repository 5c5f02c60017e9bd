"""
Sliding windows over keypoint tracks, window labels, fixed-length sequences,
dialogue-level folds and per-epoch class balancing.

A window w covers frames [start, start + 15), i.e. the ms interval
[start / fps * 1000, (start + 15) / fps * 1000).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.errors import ConfigError, ContractError
from app.services.corpus_io import FRAME_RATE_FPS, StrokeAnnotation

logger = logging.getLogger(__name__)

WINDOW_FRAMES = 15
WINDOW_STRIDE = 2
SEQUENCE_LENGTH = 40
K_FOLDS = 5
GESTURE_THRESHOLD = 0.5

WINDOW_INDEX_COLUMNS = ["speaker", "start_frame", "label", "overlap_fraction", "sequence_index"]


class Label(IntEnum):
    NEUTRAL = 0
    GESTURE = 1


@dataclass
class WindowingConfig:
    window_frames: int = WINDOW_FRAMES
    stride: int = WINDOW_STRIDE
    sequence_length: int = SEQUENCE_LENGTH
    fps: float = FRAME_RATE_FPS
    k_folds: int = K_FOLDS

    def __post_init__(self):
        fixed = {"window_frames": WINDOW_FRAMES, "stride": WINDOW_STRIDE, "sequence_length": SEQUENCE_LENGTH}
        for name, value in fixed.items():
            if getattr(self, name) != value:
                raise ConfigError(f"windowing.{name} is fixed at {value}")
        if self.fps <= 0:
            raise ConfigError("windowing.fps must be positive")
        if self.k_folds < 2:
            raise ConfigError("windowing.k_folds must be at least 2")


@dataclass(frozen=True)
class TimeWindow:
    speaker_id: str
    start_frame: int
    label: Label = Label.NEUTRAL
    overlap_fraction: float = 0.0
    n_frames: int = WINDOW_FRAMES

    def __post_init__(self):
        if self.n_frames != WINDOW_FRAMES:
            raise ContractError(f"window must span {WINDOW_FRAMES} frames, got {self.n_frames}")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ContractError(f"overlap fraction {self.overlap_fraction} outside [0, 1]")
        if (self.label == Label.GESTURE) != (self.overlap_fraction > GESTURE_THRESHOLD):
            raise ContractError(f"label {self.label.name} inconsistent with overlap {self.overlap_fraction:.3f}")

    def start_ms(self, fps: float = FRAME_RATE_FPS) -> float:
        return 1000.0 * self.start_frame / fps

    def end_ms(self, fps: float = FRAME_RATE_FPS) -> float:
        return 1000.0 * (self.start_frame + self.n_frames) / fps


@dataclass(frozen=True)
class SequenceSample:
    windows: Tuple[TimeWindow, ...]
    dialogue_id: str
    sequence_index: int

    def __post_init__(self):
        if len(self.windows) != SEQUENCE_LENGTH:
            raise ContractError(f"sequence needs {SEQUENCE_LENGTH} windows, got {len(self.windows)}")
        starts = [w.start_frame for w in self.windows]
        if any(b - a != WINDOW_STRIDE for a, b in zip(starts, starts[1:])):
            raise ContractError("sequence windows are not consecutive at stride 2")

    @property
    def speaker_id(self) -> str:
        return self.windows[0].speaker_id

    @property
    def has_gesture(self) -> bool:
        return any(w.label == Label.GESTURE for w in self.windows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(w.label) for w in self.windows], dtype=np.int64)

    @property
    def key(self) -> str:
        return f"{self.speaker_id}/{self.sequence_index}"


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    mapping: Dict[str, int] = field(default_factory=dict)

    def fold_of(self, dialogue_id: str) -> int:
        try:
            return self.mapping[dialogue_id]
        except KeyError:
            raise ConfigError(f"dialogue {dialogue_id} has no fold assignment") from None

    def dialogues_in(self, fold: int) -> List[str]:
        return sorted(d for d, f in self.mapping.items() if f == fold)

    def fold_sizes(self) -> List[int]:
        return [sum(1 for f in self.mapping.values() if f == i) for i in range(self.k)]


def slide_windows(track_n_frames: int, window: int = WINDOW_FRAMES, stride: int = WINDOW_STRIDE) -> List[int]:
    """Start frames of every complete window."""
    if track_n_frames < window:
        return []
    return list(range(0, track_n_frames - window + 1, stride))


def label_window(start_frame: int, strokes: Sequence[StrokeAnnotation], fps: float = FRAME_RATE_FPS,
                 n_frames: int = WINDOW_FRAMES) -> Tuple[Label, float]:
    """
    overlap_fraction = (ms of the window covered by strokes) / (window ms).
    Strokes must be non-overlapping (as produced by load_annotations).
    """
    w0 = 1000.0 * start_frame / fps
    w1 = 1000.0 * (start_frame + n_frames) / fps
    covered = 0.0
    for s in strokes:
        if s.end_ms <= w0:
            continue
        if s.start_ms >= w1:
            break
        covered += min(w1, s.end_ms) - max(w0, s.start_ms)
    overlap = min(max(covered / (w1 - w0), 0.0), 1.0)
    return (Label.GESTURE if overlap > GESTURE_THRESHOLD else Label.NEUTRAL), overlap


def windows_for_track(speaker_id: str, n_frames: int, strokes: Sequence[StrokeAnnotation],
                      fps: float = FRAME_RATE_FPS, stride: int = WINDOW_STRIDE) -> List[TimeWindow]:
    ordered = sorted(strokes, key=lambda s: s.start_ms)
    out = []
    for start in slide_windows(n_frames, WINDOW_FRAMES, stride):
        label, overlap = label_window(start, ordered, fps)
        out.append(TimeWindow(speaker_id, start, label, overlap))
    return out


def build_sequences(windows: Sequence[TimeWindow], dialogue_id: str,
                    n: int = SEQUENCE_LENGTH) -> List[SequenceSample]:
    """Consecutive chunks of n windows; a trailing partial chunk is dropped."""
    n_full = len(windows) // n
    dropped = len(windows) - n_full * n
    if dropped and windows:
        logger.debug(f"{windows[0].speaker_id}: dropped {dropped} trailing window(s)")
    return [SequenceSample(tuple(windows[i * n:(i + 1) * n]), dialogue_id, i) for i in range(n_full)]


def assign_folds(dialogue_ids: Sequence[str], k: int = K_FOLDS, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle of the unique dialogues, then round-robin into k folds."""
    unique = sorted(set(dialogue_ids))
    if len(unique) < k:
        raise ConfigError(f"{len(unique)} dialogue(s) cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(unique))
    mapping = {unique[j]: i % k for i, j in enumerate(order)}
    return FoldAssignment(k=k, mapping=mapping)


def validation_split(dialogue_ids: Sequence[str], fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """Seeded dialogue-level (train, validation) split; at least one dialogue on each side."""
    unique = sorted(set(dialogue_ids))
    if len(unique) < 2:
        raise ConfigError("need at least two training dialogues to hold out a validation set")
    n_val = min(max(1, int(round(fraction * len(unique)))), len(unique) - 1)
    order = np.random.default_rng([seed, 1]).permutation(len(unique))
    val = sorted(unique[j] for j in order[:n_val])
    train = sorted(unique[j] for j in order[n_val:])
    return train, val


def subsample_epoch(train_sequences: Sequence[SequenceSample], seed: int, epoch: int) -> List[SequenceSample]:
    """All gesture-containing sequences plus an equal-sized sample of all-neutral ones, shuffled."""
    gesture = [s for s in train_sequences if s.has_gesture]
    neutral = [s for s in train_sequences if not s.has_gesture]
    if not gesture:
        logger.warning(f"Epoch {epoch}: no gesture-containing sequences, subsample is empty")
        return []
    rng = np.random.default_rng([seed, epoch])
    n_neutral = min(len(gesture), len(neutral))
    picked = [neutral[i] for i in rng.choice(len(neutral), size=n_neutral, replace=False)] if n_neutral else []
    chosen = gesture + picked
    return [chosen[i] for i in rng.permutation(len(chosen))]


def gesture_prevalence(windows: Sequence[TimeWindow]) -> float:
    if not windows:
        return 0.0
    return sum(1 for w in windows if w.label == Label.GESTURE) / len(windows)


def write_window_index(path: str | Path, windows: Sequence[TimeWindow], sequence_length: int = SEQUENCE_LENGTH) -> None:
    """One row per window; sequence_index is -1 for windows of a dropped trailing chunk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    by_speaker: Dict[str, int] = {}
    for w in windows:
        i = by_speaker.get(w.speaker_id, 0)
        by_speaker[w.speaker_id] = i + 1
        rows.append((w.speaker_id, w.start_frame, int(w.label), w.overlap_fraction, i // sequence_length))
    df = pd.DataFrame(rows, columns=WINDOW_INDEX_COLUMNS)
    for speaker, count in by_speaker.items():
        n_full = count // sequence_length
        mask = (df["speaker"] == speaker) & (df["sequence_index"] >= n_full)
        df.loc[mask, "sequence_index"] = -1
    df.to_csv(path, index=False, lineterminator="\n")


def read_window_index(path: str | Path) -> List[TimeWindow]:
    df = pd.read_csv(path, dtype={"speaker": str})
    return [TimeWindow(r.speaker, int(r.start_frame), Label(int(r.label)), float(r.overlap_fraction))
            for r in df.itertuples(index=False)]
