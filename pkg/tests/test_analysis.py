from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
import torch
from scipy import stats

from app.core.errors import ConfigError, ContractError, InputError
from app.services.analysis import (
    AnalysisConfig,
    BalancedSampleSet,
    GradCAM,
    compare_activations,
    compare_confidences,
    confidence_feature_correlation,
    feature_distribution_table,
    grad_cam,
    gradcam_activation_table,
    mann_whitney_u,
    region_contrast,
    sample_balanced_windows,
    spearman,
    welch_t,
)
from app.services.predictions import PredictionSet
from app.services.models import build_model
from app.services.pose_graph import build_adjacency
from app.services.speech_features import FEATURE_NAMES

from conftest import tiny_model_config


def test_welch_t_small_example():
    res = welch_t([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
    assert res.statistic == pytest.approx(-3.0 / np.sqrt(2.0 / 3.0))
    assert res.df == pytest.approx(4.0)
    assert res.p_value == pytest.approx(2 * stats.t.sf(3.0 / np.sqrt(2.0 / 3.0), 4.0))


def test_welch_t_against_formula(rng):
    for _ in range(10):
        a = rng.normal(0, 1, int(rng.integers(2, 30)))
        b = rng.normal(0.5, 3, int(rng.integers(2, 30)))
        v1, v2 = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
        res = welch_t(a, b)
        assert res.statistic == pytest.approx((a.mean() - b.mean()) / np.sqrt(v1 + v2))
        assert res.df == pytest.approx((v1 + v2) ** 2 / (v1 ** 2 / (a.size - 1) + v2 ** 2 / (b.size - 1)))
        assert 0.0 <= res.p_value <= 1.0
        assert (res.n1, res.n2) == (a.size, b.size)


def test_welch_t_degenerate_samples():
    assert welch_t([1.0], [1.0, 2.0]) is None
    assert welch_t([2.0, 2.0], [3.0, 3.0, 3.0]) is None


def test_spearman_against_ranked_pearson(rng):
    a = np.round(rng.normal(size=40), 1)
    b = np.round(a + rng.normal(size=40), 1)
    res = spearman(a, b)
    expected = np.corrcoef(stats.rankdata(a), stats.rankdata(b))[0, 1]
    assert res.statistic == pytest.approx(expected)
    assert res.df == 38
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]).statistic == pytest.approx(1.0)


def test_spearman_rejects_unpaired_or_tiny_input():
    with pytest.raises(InputError):
        spearman([1, 2, 3], [1, 2])
    with pytest.raises(InputError):
        spearman([1, 2], [1, 2])
    assert spearman([1, 1, 1], [1, 2, 3]) is None


def _pair_count_u(a, b):
    return sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)


def test_mann_whitney_u_counts_pairs(rng):
    a = np.round(rng.normal(size=15), 1)
    b = np.round(rng.normal(0.3, 1, size=11), 1)
    assert mann_whitney_u(a, b).statistic == pytest.approx(_pair_count_u(a, b))


def test_mann_whitney_u_extremes():
    assert mann_whitney_u([5, 6, 7], [1, 2]).statistic == 6.0
    same = mann_whitney_u([1, 2, 3], [1, 2, 3])
    assert same.statistic == 4.5
    assert same.p_value == pytest.approx(1.0)
    assert mann_whitney_u([1, 2], [3]).statistic == 0.0
    with pytest.raises(InputError):
        mann_whitney_u([], [1.0])


def test_compare_confidences_uses_gesture_windows_only():
    a = PredictionSet.from_labels([1, 1, 1, 0], [0.9, 0.8, 0.7, 0.0], window_ids=["w", "x", "y", "z"])
    b = PredictionSet.from_labels([0, 1, 1, 1], [1.0, 0.1, 0.2, 0.3], window_ids=["z", "w", "x", "y"])
    res = compare_confidences(a, b)
    assert res.statistic == 9.0
    assert (res.n1, res.n2) == (3, 3)
    neutral = PredictionSet.from_labels([0, 0], [0.1, 0.2])
    with pytest.raises(InputError):
        compare_confidences(neutral, neutral)


def test_analysis_config_validation():
    with pytest.raises(ConfigError):
        AnalysisConfig(min_voiced_segments=0)
    with pytest.raises(ConfigError):
        AnalysisConfig(max_per_bin=0)
    with pytest.raises(ConfigError):
        AnalysisConfig(models=["speech", "audio"])


@pytest.fixture(scope="module")
def balanced(tiny_corpus):
    return sample_balanced_windows(tiny_corpus, seed=0, cfg=AnalysisConfig(max_per_bin=3))


def test_balanced_sample_has_equal_classes_per_bin(balanced):
    assert len(balanced) > 0
    assert balanced.n_gesture == balanced.n_neutral
    counts = balanced.bin_counts()
    assert (counts["gesture"] == counts["neutral"]).all()
    assert counts.max().max() <= 3
    assert balanced.frame["voiced_segments"].between(1, 9).all()
    assert set(FEATURE_NAMES) <= set(balanced.frame.columns)
    assert not balanced.frame["window_id"].duplicated().any()


def test_balanced_sample_is_seeded(tiny_corpus, balanced):
    again = sample_balanced_windows(tiny_corpus, seed=0, cfg=AnalysisConfig(max_per_bin=3))
    assert again.frame["window_id"].tolist() == balanced.frame["window_id"].tolist()


def test_balanced_sample_csv(tmp_path, balanced):
    balanced.to_csv(tmp_path / "samples.csv")
    back = BalancedSampleSet.from_csv(tmp_path / "samples.csv")
    assert back.frame["window_id"].tolist() == balanced.frame["window_id"].tolist()
    assert np.allclose(back.feature_values("mfcc1_amean"), balanced.feature_values("mfcc1_amean"))


def test_feature_distribution_table(balanced):
    table = feature_distribution_table(balanced)
    assert table["feature"].tolist() == FEATURE_NAMES
    assert (table["n_gesture"] <= balanced.n_gesture).all()
    row = table.set_index("feature").loc["mfcc1_amean"]
    g = balanced.feature_values("mfcc1_amean", "gesture")
    assert row["gesture_mean"] == pytest.approx(g.mean())


def test_confidence_feature_correlation(balanced, rng):
    frame = balanced.frame
    preds = PredictionSet(frame["window_id"], rng.random(len(frame)), frame["label"])
    table = confidence_feature_correlation({"speech": preds, "vision": preds}, balanced)
    assert list(table.columns) == ["feature", "speech_rho", "speech_p", "vision_rho", "vision_p"]
    assert len(table) == len(FEATURE_NAMES)
    assert np.allclose(table["speech_rho"].fillna(0), table["vision_rho"].fillna(0))
    other = PredictionSet.from_labels([0], [0.5], window_ids=["nowhere@0"])
    with pytest.raises(InputError):
        confidence_feature_correlation({"speech": other}, balanced)


@pytest.fixture
def speech_model():
    return build_model(tiny_model_config("speech"), build_adjacency().A_norm).eval()


def test_gradcam_heatmap_shape_and_range(speech_model, rng):
    heatmap = grad_cam(speech_model, rng.normal(size=(64, 96)))
    assert heatmap.shape == (64, 96)
    assert heatmap.min() >= 0.0
    assert heatmap.max() == pytest.approx(1.0) or not heatmap.any()


def test_gradcam_ignores_constant_logit_shift(speech_model, rng):
    mel = rng.normal(size=(64, 48))
    before = grad_cam(speech_model, mel, layer_index=0)
    with torch.no_grad():
        speech_model.speech_classifier.net[-1].bias += 5.0
    after = grad_cam(speech_model, mel, layer_index=0)
    assert np.allclose(before, after, atol=1e-6)


def test_gradcam_contract(rng):
    adjacency = build_adjacency().A_norm
    with pytest.raises(ContractError):
        GradCAM(build_model(tiny_model_config("early"), adjacency))
    model = build_model(tiny_model_config("speech"), adjacency)
    with pytest.raises(ConfigError):
        GradCAM(model, layer_index=5)
    with GradCAM(model) as cam, pytest.raises(ContractError):
        cam(rng.normal(size=(32, 48)))
    with torch.no_grad():
        model.speech_classifier.net[0].weight[0, 0] = float("nan")
    with pytest.raises(ContractError):
        GradCAM(model)


def test_region_contrast():
    heatmap = np.zeros((4, 6))
    heatmap[:, :3] = 1.0
    mask = np.zeros((4, 6), dtype=bool)
    mask[:, :3] = True
    assert region_contrast(heatmap, mask) == (1.0, 0.0)
    with pytest.raises(InputError):
        region_contrast(heatmap, np.ones((4, 6)))
    with pytest.raises(ContractError):
        region_contrast(heatmap, np.ones((4, 5)))


def test_activation_table_and_comparison(speech_model, rng):
    items = [(f"s@{2 * i}", i % 2, rng.normal(size=(64, 96))) for i in range(6)]
    table = gradcam_activation_table(speech_model, items)
    assert table["class"].tolist() == ["neutral", "gesture"] * 3
    assert table["mean_activation"].between(0.0, 1.0).all()
    res = compare_activations(table)
    assert res is None or (res.n1, res.n2) == (3, 3)
    empty = pd.DataFrame({"class": ["gesture"], "mean_activation": [0.5]})
    assert compare_activations(empty) is None
