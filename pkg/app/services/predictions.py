"""Scored windows: the unit every evaluation, ensemble and analysis step consumes."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from app.core.errors import ContractError, FormatError, InputError

PREDICTION_COLUMNS = ["window_id", "dialogue_id", "speaker_id", "label", "score"]


@dataclass
class PredictionSet:
    """Per window: identifier, gesture score in [0, 1] and true label (1 = gesture)."""
    window_ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    dialogue_ids: Optional[np.ndarray] = None
    speaker_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.window_ids = np.asarray(self.window_ids, dtype=object)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.window_ids)
        if self.dialogue_ids is None:
            self.dialogue_ids = np.array([""] * n, dtype=object)
        if self.speaker_ids is None:
            self.speaker_ids = np.array([""] * n, dtype=object)
        self.dialogue_ids = np.asarray(self.dialogue_ids, dtype=object)
        self.speaker_ids = np.asarray(self.speaker_ids, dtype=object)
        if not (len(self.scores) == len(self.labels) == len(self.dialogue_ids) == len(self.speaker_ids) == n):
            raise ContractError("prediction fields have different lengths")
        if len(set(self.window_ids.tolist())) != n:
            raise ContractError("window identifiers in a prediction set must be unique")
        if n and (not np.all(np.isfinite(self.scores)) or self.scores.min() < 0 or self.scores.max() > 1):
            raise ContractError("prediction scores must be finite and within [0, 1]")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise ContractError("labels must be 0 (neutral) or 1 (gesture)")

    def __len__(self) -> int:
        return len(self.window_ids)

    @classmethod
    def empty(cls) -> "PredictionSet":
        return cls(np.array([], dtype=object), np.array([]), np.array([], dtype=np.int64))

    @classmethod
    def from_labels(cls, labels: Sequence[int], scores: Sequence[float],
                    window_ids: Optional[Sequence[str]] = None) -> "PredictionSet":
        labels = np.asarray(labels)
        ids = np.asarray(window_ids, dtype=object) if window_ids is not None else \
            np.array([f"w{i}" for i in range(len(labels))], dtype=object)
        return cls(ids, np.asarray(scores, dtype=np.float64), labels)

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0

    def with_scores(self, scores: np.ndarray) -> "PredictionSet":
        return PredictionSet(self.window_ids, scores, self.labels, self.dialogue_ids, self.speaker_ids)

    def aligned_to(self, other: "PredictionSet") -> "PredictionSet":
        """This set reordered to other's window order; identifier sets must match."""
        if set(self.window_ids.tolist()) != set(other.window_ids.tolist()) or len(self) != len(other):
            raise ContractError("prediction sets cover different windows")
        pos = {w: i for i, w in enumerate(self.window_ids.tolist())}
        order = np.array([pos[w] for w in other.window_ids.tolist()], dtype=np.int64)
        return PredictionSet(self.window_ids[order], self.scores[order], self.labels[order],
                             self.dialogue_ids[order], self.speaker_ids[order])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"window_id": self.window_ids, "dialogue_id": self.dialogue_ids,
                             "speaker_id": self.speaker_ids, "label": self.labels, "score": self.scores})

    def to_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.8g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "PredictionSet":
        path = Path(path)
        if not path.exists():
            raise InputError(f"prediction file not found: {path}")
        df = pd.read_csv(path, dtype={"window_id": str, "dialogue_id": str, "speaker_id": str},
                         keep_default_na=False)
        missing = [c for c in PREDICTION_COLUMNS if c not in df.columns]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}")
        return cls(df["window_id"].to_numpy(object), df["score"].to_numpy(np.float64),
                   df["label"].to_numpy(np.int64), df["dialogue_id"].to_numpy(object),
                   df["speaker_id"].to_numpy(object))

    @classmethod
    def concat(cls, parts: Sequence["PredictionSet"]) -> "PredictionSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.window_ids for p in parts]), np.concatenate([p.scores for p in parts]),
                   np.concatenate([p.labels for p in parts]), np.concatenate([p.dialogue_ids for p in parts]),
                   np.concatenate([p.speaker_ids for p in parts]))
