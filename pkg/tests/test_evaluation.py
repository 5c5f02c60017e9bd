from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from app.core.errors import ContractError, FormatError, InputError
from app.services.evaluation import (
    MetricReport,
    average_precision,
    ensemble_average,
    f1,
    majority_baseline,
    map_by_buffer_table,
    pr_curve,
    precision_recall_at,
    prediction_agreement,
    random_baseline,
    roc_auc,
    roc_curve,
    summary_table,
)
from app.services.predictions import PredictionSet


def _brute_force_ap(labels, scores):
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= t
        tp = np.sum(predicted & (labels == 1))
        precision, recall = tp / predicted.sum(), tp / labels.sum()
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def _labels(n, n_gesture, rng):
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.choice(n, n_gesture, replace=False)] = 1
    return labels


def test_average_precision_against_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = _labels(n, int(rng.integers(1, n + 1)), rng)
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        preds = PredictionSet.from_labels(labels, scores)
        assert average_precision(preds) == pytest.approx(_brute_force_ap(labels, scores), rel=0, abs=1e-9)


def test_constant_scorer_has_ap_equal_to_prevalence(rng):
    labels = _labels(200, 17, rng)
    preds = PredictionSet.from_labels(labels, np.full(200, 0.3))
    assert average_precision(preds) == pytest.approx(17 / 200)
    assert average_precision(PredictionSet.from_labels(np.zeros(5), np.full(5, 0.3))) is None


def test_f1_thresholds_at_one_half():
    preds = PredictionSet.from_labels([1, 1, 0, 0], [0.5, 0.49, 0.7, 0.1])
    assert precision_recall_at(preds) == (0.5, 0.5)
    assert f1(preds) == pytest.approx(0.5)
    assert f1(PredictionSet.from_labels([1, 0], [0.2, 0.9])) == 0.0


def test_baselines_at_low_prevalence(rng):
    n, n_gesture = 848_800, 66_206
    prevalence = n_gesture / n
    labels = _labels(n, n_gesture, rng)
    majority = majority_baseline(labels)
    assert f1(majority) == 0.0
    assert average_precision(majority) == pytest.approx(prevalence, rel=0, abs=1e-12)
    rand = random_baseline(labels, seed=0)
    assert f1(rand) == pytest.approx(2 * prevalence * 0.5 / (prevalence + 0.5), abs=0.01)
    assert average_precision(rand) == pytest.approx(prevalence, abs=0.005)
    assert np.array_equal(rand.scores, random_baseline(labels, seed=0).scores)


def test_curves_need_both_classes():
    preds = PredictionSet.from_labels([1, 0, 1, 0], [0.9, 0.8, 0.3, 0.1])
    pr = pr_curve(preds)
    assert np.all(np.diff(pr.x) >= 0)
    roc = roc_curve(preds)
    assert (roc.x[0], roc.y[0]) == (0.0, 0.0)
    assert (roc.x[-1], roc.y[-1]) == (1.0, 1.0)
    assert roc_auc(preds) == pytest.approx(0.75)
    single = PredictionSet.from_labels([0, 0], [0.1, 0.2])
    assert pr_curve(single) is None and roc_curve(single) is None and roc_auc(single) is None


def test_prediction_set_contract():
    with pytest.raises(ContractError):
        PredictionSet.from_labels([0, 1], [0.2, 1.2])
    with pytest.raises(ContractError):
        PredictionSet.from_labels([0, 1], [0.2, 0.3], window_ids=["a", "a"])
    with pytest.raises(ContractError):
        PredictionSet.from_labels([0, 2], [0.2, 0.3])


def test_prediction_csv(tmp_path):
    preds = PredictionSet(["s@0", "s@2"], [0.25, 0.75], [0, 1], ["d", "d"], ["s", "s"])
    preds.to_csv(tmp_path / "p.csv")
    back = PredictionSet.from_csv(tmp_path / "p.csv")
    assert back.window_ids.tolist() == ["s@0", "s@2"]
    assert np.allclose(back.scores, preds.scores)
    pd.DataFrame({"window_id": ["a"]}).to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(FormatError):
        PredictionSet.from_csv(tmp_path / "bad.csv")
    with pytest.raises(InputError):
        PredictionSet.from_csv(tmp_path / "missing.csv")


def test_ensemble_averages_aligned_windows():
    a = PredictionSet.from_labels([1, 0, 1], [0.9, 0.2, 0.4], window_ids=["x", "y", "z"])
    b = PredictionSet.from_labels([1, 1, 0], [0.6, 0.1, 0.0], window_ids=["z", "x", "y"])
    mean = ensemble_average(a, b)
    assert mean.window_ids.tolist() == ["x", "y", "z"]
    assert np.allclose(mean.scores, [0.5, 0.1, 0.5])
    with pytest.raises(ContractError):
        ensemble_average(a, PredictionSet.from_labels([1, 0], [0.1, 0.1], window_ids=["x", "y"]))


def test_prediction_agreement():
    a = PredictionSet.from_labels([1, 1, 0, 1], [0.9, 0.1, 0.6, 0.2])
    b = PredictionSet.from_labels([1, 1, 0, 1], [0.8, 0.7, 0.1, 0.3])
    agreement = prediction_agreement(a, b)
    assert agreement["n_windows"] == 4
    assert agreement["disagreement_rate"] == pytest.approx(0.5)
    assert agreement["both_wrong_gesture_rate"] == pytest.approx(1 / 3)
    assert agreement["median_confidence_a"] == pytest.approx(0.2)
    assert agreement["median_confidence_b"] == pytest.approx(0.7)


def _report(name="speech"):
    per_fold = {
        0: PredictionSet.from_labels([1, 0, 1, 0], [0.9, 0.1, 0.8, 0.2]),
        1: PredictionSet.from_labels([1, 0, 1, 0], [0.1, 0.9, 0.2, 0.8]),
    }
    return MetricReport.from_predictions(name, per_fold)


def test_report_aggregates_with_population_std():
    agg = _report().aggregate()
    assert agg["f1"] == pytest.approx(0.5)
    assert agg["f1_std"] == pytest.approx(0.5)
    assert agg["n_windows"] == 8
    assert _report().cell("f1") == "50.0±50.0"


def test_report_write(tmp_path):
    out = _report().write(tmp_path / "speech")
    for name in ("metrics.csv", "metrics.json", "report.txt", "pr_curve.csv", "roc_curve.csv"):
        assert (out / name).exists()
    payload = MetricReport.read_json(out / "metrics.json")
    assert payload["name"] == "speech"
    assert [r["fold"] for r in payload["folds"]] == [0, 1]
    assert pd.read_csv(out / "metrics.csv")["fold"].astype(str).tolist() == ["0", "1", "mean"]


def test_summary_and_map_by_buffer_tables():
    table = summary_table([_report("speech"), _report("vision")])
    assert table["model"].tolist() == ["speech", "vision"]
    assert table.loc[0, "F1"] == "50.0±50.0"
    by_buffer = map_by_buffer_table({("speech", 500): _report(), ("speech", 0): _report()})
    assert by_buffer["buffer_ms"].tolist() == [0, 500]
    assert list(by_buffer.columns) == ["variant", "buffer_ms", "map", "map_std"]
    assert map_by_buffer_table({}).empty
