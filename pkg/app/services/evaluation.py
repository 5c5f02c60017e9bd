"""
Window-level evaluation of gesture predictions.

Metrics are computed on windows pooled within a test fold. AP treats equal scores as
one group (a constant scorer scores AP == prevalence). F1 thresholds the softmax
gesture probability at >= 0.5 and is 0 when there are no true positives.
Cross-fold aggregates are mean and population std over folds, reported in percent.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, f1_score as sk_f1_score
from sklearn.metrics import precision_recall_curve, precision_score, recall_score, roc_auc_score
from sklearn.metrics import roc_curve as sk_roc_curve

from app.core.errors import ConfigError, ContractError
from app.services.inference import predict_sequences, predictions_path, run_dir
from app.services.models import FusionVariant, load_checkpoint
from app.services.predictions import PredictionSet

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
METRICS = ["f1", "map", "precision", "recall", "roc_auc", "f1_neutral", "map_neutral"]


@dataclass
class CurvePoints:
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray


def _decisions(preds: PredictionSet, threshold: float) -> np.ndarray:
    return (preds.scores >= threshold).astype(np.int64)


def f1(preds: PredictionSet, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Gesture-class F1 at threshold; 0 when there are no true positives."""
    return float(sk_f1_score(preds.labels, _decisions(preds, threshold), pos_label=1, zero_division=0))


def precision_recall_at(preds: PredictionSet, threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    d = _decisions(preds, threshold)
    return (float(precision_score(preds.labels, d, zero_division=0)),
            float(recall_score(preds.labels, d, zero_division=0)))


def average_precision(preds: PredictionSet) -> Optional[float]:
    """Step-wise gesture AP over descending score groups; None without positives."""
    if len(preds) == 0 or preds.labels.sum() == 0:
        return None
    return float(average_precision_score(preds.labels, preds.scores))


def _neutral_view(preds: PredictionSet) -> PredictionSet:
    return PredictionSet(preds.window_ids, 1.0 - preds.scores, 1 - preds.labels)


def pr_curve(preds: PredictionSet) -> Optional[CurvePoints]:
    """(recall ascending, precision); None unless both classes are present."""
    if len(np.unique(preds.labels)) < 2:
        return None
    precision, recall, thresholds = precision_recall_curve(preds.labels, preds.scores)
    # drop the (recall 0, precision 1) end point, reverse to ascending recall
    return CurvePoints(x=recall[:-1][::-1].copy(), y=precision[:-1][::-1].copy(), thresholds=thresholds[::-1].copy())


def roc_curve(preds: PredictionSet) -> Optional[CurvePoints]:
    """(false positive rate, true positive rate) from (0, 0) to (1, 1); None unless both classes are present."""
    if len(np.unique(preds.labels)) < 2:
        return None
    fpr, tpr, thresholds = sk_roc_curve(preds.labels, preds.scores, drop_intermediate=False)
    return CurvePoints(x=fpr, y=tpr, thresholds=thresholds)


def roc_auc(preds: PredictionSet) -> Optional[float]:
    if len(np.unique(preds.labels)) < 2:
        return None
    return float(roc_auc_score(preds.labels, preds.scores))


def _reference(reference: Union[PredictionSet, Sequence[int]]) -> PredictionSet:
    if isinstance(reference, PredictionSet):
        return reference
    labels = np.asarray(reference)
    return PredictionSet.from_labels(labels, np.zeros(len(labels)))


def random_baseline(reference: Union[PredictionSet, Sequence[int]], seed: int = 0) -> PredictionSet:
    """Uniform random gesture scores in [0, 1)."""
    ref = _reference(reference)
    return ref.with_scores(np.random.default_rng(seed).random(len(ref)))


def majority_baseline(reference: Union[PredictionSet, Sequence[int]]) -> PredictionSet:
    """Every window predicted neutral: gesture score 0."""
    ref = _reference(reference)
    return ref.with_scores(np.zeros(len(ref)))


def ensemble_average(a: PredictionSet, b: PredictionSet) -> PredictionSet:
    """Per-window mean of gesture scores, in a's window order."""
    b = b.aligned_to(a)
    if not np.array_equal(a.labels, b.labels):
        raise ContractError("prediction sets disagree on window labels")
    return a.with_scores((a.scores + b.scores) / 2.0)


def prediction_agreement(a: PredictionSet, b: PredictionSet, threshold: float = DEFAULT_THRESHOLD) -> Dict[str, Any]:
    """How often two models' decisions differ, and how they fare on gesture windows."""
    b = b.aligned_to(a)
    da, db = _decisions(a, threshold), _decisions(b, threshold)
    gesture = a.labels == 1
    return {
        "n_windows": len(a),
        "disagreement_rate": float(np.mean(da != db)) if len(a) else 0.0,
        "both_wrong_gesture_rate": float(np.mean((da[gesture] == 0) & (db[gesture] == 0))) if gesture.any() else None,
        "median_confidence_a": float(np.median(a.scores[gesture])) if gesture.any() else None,
        "median_confidence_b": float(np.median(b.scores[gesture])) if gesture.any() else None,
    }


def fold_metrics(preds: PredictionSet, threshold: float = DEFAULT_THRESHOLD) -> Dict[str, Optional[float]]:
    precision, recall = precision_recall_at(preds, threshold)
    neutral = _neutral_view(preds)
    return {
        "f1": f1(preds, threshold),
        "map": average_precision(preds),
        "precision": precision,
        "recall": recall,
        "roc_auc": roc_auc(preds),
        "f1_neutral": f1(neutral, threshold),
        "map_neutral": average_precision(neutral),
        "n_windows": len(preds),
        "prevalence": preds.prevalence,
    }


def _pct(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None or np.isnan(mean):
        return "n/a"
    return f"{100 * mean:.1f}±{100 * (std or 0.0):.1f}"


@dataclass
class MetricReport:
    name: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    curves: Dict[str, Dict[str, Optional[CurvePoints]]] = field(default_factory=dict)
    threshold: float = DEFAULT_THRESHOLD

    @classmethod
    def from_predictions(cls, name: str, per_fold: Dict[int, PredictionSet],
                         threshold: float = DEFAULT_THRESHOLD) -> "MetricReport":
        report = cls(name=name, threshold=threshold)
        for fold in sorted(per_fold):
            preds = per_fold[fold]
            report.rows.append({"fold": fold, **fold_metrics(preds, threshold)})
            report.curves[str(fold)] = {"pr": pr_curve(preds), "roc": roc_curve(preds)}
        return report

    def aggregate(self) -> Dict[str, Optional[float]]:
        """Mean and population std over folds; folds with undefined values are skipped per metric."""
        out: Dict[str, Optional[float]] = {}
        for m in METRICS:
            values = np.array([r[m] for r in self.rows if r.get(m) is not None], dtype=np.float64)
            out[m] = float(values.mean()) if values.size else None
            out[f"{m}_std"] = float(values.std(ddof=0)) if values.size else None
        out["n_windows"] = int(sum(r["n_windows"] for r in self.rows))
        return out

    def cell(self, metric: str) -> str:
        agg = self.aggregate()
        return _pct(agg[metric], agg[f"{metric}_std"])

    def to_frame(self) -> pd.DataFrame:
        rows = [{"name": self.name, **r} for r in self.rows]
        rows.append({"name": self.name, "fold": "mean", **self.aggregate()})
        return pd.DataFrame(rows)

    def to_text(self) -> str:
        lines = [f"{self.name}: F1 {self.cell('f1')}  MAP {self.cell('map')}  "
                 f"P {self.cell('precision')}  R {self.cell('recall')}  AUC {self.cell('roc_auc')}"]
        for r in self.rows:
            ap = "n/a" if r["map"] is None else f"{100 * r['map']:.1f}"
            lines.append(f"  fold {r['fold']}: F1 {100 * r['f1']:.1f}  MAP {ap}  windows {r['n_windows']}"
                         f"  prevalence {100 * r['prevalence']:.1f}%")
        return "\n".join(lines)

    def write(self, out_dir: str | Path) -> Path:
        """metrics.csv, metrics.json, report.txt and per-fold curve CSVs under out_dir."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out_dir / "metrics.csv", index=False, float_format="%.6f", lineterminator="\n")
        payload = {"name": self.name, "threshold": self.threshold, "folds": self.rows, "aggregate": self.aggregate()}
        (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2, default=str) + "\n", encoding="utf-8")
        (out_dir / "report.txt").write_text(self.to_text() + "\n", encoding="utf-8")
        for kind, (x_name, y_name) in (("pr", ("recall", "precision")), ("roc", ("fpr", "tpr"))):
            frames = []
            for fold, curves in self.curves.items():
                c = curves.get(kind)
                if c is not None:
                    frames.append(pd.DataFrame({"fold": fold, x_name: c.x, y_name: c.y, "threshold": c.thresholds}))
            if frames:
                pd.concat(frames).to_csv(out_dir / f"{kind}_curve.csv", index=False, float_format="%.6f",
                                         lineterminator="\n")
        return out_dir

    @staticmethod
    def read_json(path: str | Path) -> Dict[str, Any]:
        return json.loads(Path(path).read_text(encoding="utf-8"))


def summary_table(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """One row per report in the 'mean±std' percent format."""
    return pd.DataFrame([{"model": r.name, "F1": r.cell("f1"), "MAP": r.cell("map"),
                          "precision": r.cell("precision"), "recall": r.cell("recall")} for r in reports])


def map_by_buffer_table(reports: Dict[tuple, MetricReport]) -> pd.DataFrame:
    """reports keyed by (variant, buffer_ms) -> variant x buffer table of mean gesture MAP (percent)."""
    rows = [{"variant": v, "buffer_ms": b, "map": (r.aggregate()["map"] or 0.0) * 100,
             "map_std": (r.aggregate()["map_std"] or 0.0) * 100} for (v, b), r in reports.items()]
    if not rows:
        return pd.DataFrame(columns=["variant", "buffer_ms", "map", "map_std"])
    return pd.DataFrame(rows).sort_values(["variant", "buffer_ms"]).reset_index(drop=True)


def cross_validate(corpus, folds, fold_indices: Sequence[int], variant, buffer_ms: int, output_dir: str | Path,
                   batch_size: int = 16, threshold: float = DEFAULT_THRESHOLD,
                   device: Optional[str] = None) -> tuple[MetricReport, Dict[int, PredictionSet]]:
    """Score every window of each test fold with that fold's checkpoint."""
    variant = FusionVariant(variant)
    per_fold: Dict[int, PredictionSet] = {}
    for fold in fold_indices:
        rdir = run_dir(output_dir, variant, buffer_ms, fold)
        checkpoint = rdir / "model.pt"
        if not checkpoint.exists():
            raise ConfigError(f"no trained {variant.value} checkpoint for fold {fold} (buffer {buffer_ms} ms): {checkpoint}")
        model, _ = load_checkpoint(checkpoint, corpus.adjacency)
        test_sequences = corpus.sequences_for(folds.dialogues_in(fold))
        preds = predict_sequences(model, corpus, test_sequences, buffer_ms, batch_size, device)
        preds.to_csv(predictions_path(rdir))
        per_fold[fold] = preds
        logger.info(f"{variant.value} fold {fold}: {len(preds)} test windows, AP {average_precision(preds)}")
    return MetricReport.from_predictions(variant.value, per_fold, threshold), per_fold
