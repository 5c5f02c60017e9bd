"""Scoring trained detectors on preprocessed sequences, and where each run keeps its outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from app.core.config import settings
from app.services.models import GESTURE_COLUMN, FusionVariant, GestureDetector
from app.services.predictions import PredictionSet
from app.services.windowing import SequenceSample


def run_dir(output_dir: str | Path, variant: FusionVariant | str, buffer_ms: int, fold: int) -> Path:
    return Path(output_dir) / "runs" / FusionVariant(variant).value / f"buffer_{buffer_ms}" / f"fold_{fold}"


def predict_sequences(model: GestureDetector, corpus, sequences: Sequence[SequenceSample], buffer_ms: int,
                      batch_size: int = 16, device: Optional[str] = None) -> PredictionSet:
    """Softmax gesture probabilities for every window of the given sequences, no subsampling."""
    device = device or settings.DEVICE
    model.eval()
    scores, labels, ids, dialogues, speakers = [], [], [], [], []
    need_pose, need_mel = model.cfg.uses_vision, model.cfg.uses_speech_input
    for i in range(0, len(sequences), batch_size):
        chunk = sequences[i:i + batch_size]
        pose, mel, y = corpus.tensors(chunk, buffer_ms, pose=need_pose, mel=need_mel)
        probs = model.predict_proba(pose.to(device) if pose is not None else None,
                                    mel.to(device) if mel is not None else None)
        scores.append(probs[..., GESTURE_COLUMN].reshape(-1).cpu().numpy().astype(np.float64))
        labels.append(y.reshape(-1).numpy())
        for seq in chunk:
            ids += corpus.window_ids(seq)
            dialogues += [seq.dialogue_id] * len(seq.windows)
            speakers += [seq.speaker_id] * len(seq.windows)
    if not ids:
        return PredictionSet.empty()
    return PredictionSet(np.array(ids, dtype=object), np.concatenate(scores), np.concatenate(labels),
                         np.array(dialogues, dtype=object), np.array(speakers, dtype=object))


def predictions_path(run_dir: str | Path) -> Path:
    return Path(run_dir) / "predictions.csv"
