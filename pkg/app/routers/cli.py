"""
Command handlers: synth, preprocess, train, eval, analyze and plot.

Every handler takes the parsed argparse namespace, loads the experiment config
(flags override config keys only) and writes the resolved config.yaml next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.errors import ConfigError, InputError
from app.core.experiment import ExperimentConfig, load_experiment
from app.services import analysis, plots
from app.services.corpus_io import AudioTrack, load_audio
from app.services.dataset import PreprocessedCorpus, preprocess
from app.services.evaluation import (
    MetricReport,
    cross_validate,
    ensemble_average,
    map_by_buffer_table,
    majority_baseline,
    prediction_agreement,
    random_baseline,
    summary_table,
)
from app.services.inference import run_dir
from app.services.models import FusionVariant, load_checkpoint
from app.services.predictions import PredictionSet
from app.services.speech_features import SpeechWindowConfig, estimate_f0, extract_window_audio, mel_spectrogram
from app.services.synthetic_corpus import write_synthetic_corpus
from app.services.training import train
from app.services.windowing import FoldAssignment, Label, assign_folds

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------------------
# Shared plumbing
# ----------------------------------------------------------------------------------------

def _overrides(args: argparse.Namespace) -> List[str]:
    items = list(getattr(args, "set", None) or [])
    for flag, key in (("seed", "seed"), ("jobs", "jobs"), ("output_dir", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            if flag == "output_dir":
                value = Path(value).resolve()
            items.append(f"{key}={value}")
    return items


def _load(args: argparse.Namespace) -> ExperimentConfig:
    return load_experiment(getattr(args, "config", None), _overrides(args))


def _open_corpus(cfg: ExperimentConfig) -> PreprocessedCorpus:
    return PreprocessedCorpus.open(cfg.cache_path)


def _folds(cfg: ExperimentConfig, corpus: PreprocessedCorpus) -> FoldAssignment:
    folds = assign_folds(corpus.dialogues(), cfg.windowing.k_folds, cfg.seed)
    path = cfg.output_path / "folds.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(sorted(folds.mapping.items()), columns=["dialogue_id", "fold"]) \
        .to_csv(path, index=False, lineterminator="\n")
    return folds


def _eval_dir(cfg: ExperimentConfig) -> Path:
    return cfg.output_path / "eval"


def _pooled_predictions(cfg: ExperimentConfig, variant: str, buffer_ms: int) -> Optional[PredictionSet]:
    """All evaluated folds of one model concatenated, or None when it was never evaluated."""
    parts = []
    for fold in cfg.fold_indices():
        path = run_dir(cfg.output_path, variant, buffer_ms, fold) / "predictions.csv"
        if path.exists():
            parts.append(PredictionSet.from_csv(path))
    return PredictionSet.concat(parts) if parts else None


class _WindowAudio:
    """Speech span of a window, loading each speaker's track once."""

    def __init__(self, corpus: PreprocessedCorpus, buffer_ms: int):
        self.entries = {e.speaker_id: e for e in corpus.manifest()}
        self.fps = float(corpus.summary["fps"])
        self.scfg = SpeechWindowConfig(buffer_ms=buffer_ms)
        self._tracks: Dict[str, AudioTrack] = {}

    def __call__(self, speaker_id: str, start_frame: int) -> np.ndarray:
        if speaker_id not in self._tracks:
            if speaker_id not in self.entries:
                raise InputError(f"speaker {speaker_id} is not in the corpus manifest")
            entry = self.entries[speaker_id]
            self._tracks[speaker_id] = load_audio(entry.audio_path, speaker_id)
        return extract_window_audio(self._tracks[speaker_id], start_frame, self.scfg, self.fps)


def _safe_name(window_id: str) -> str:
    return window_id.replace("@", "_").replace("/", "_")


# ----------------------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> Path:
    cfg = _load(args)
    manifest = write_synthetic_corpus(cfg.synthetic, cfg.corpus_dir, force=bool(getattr(args, "force", False)))
    cfg.dump(cfg.corpus_dir)
    n_tracks = cfg.synthetic.n_dialogues * cfg.synthetic.speakers_per_dialogue
    print(f"synth: {cfg.synthetic.n_dialogues} dialogues, {n_tracks} speaker tracks -> {manifest}")
    return manifest


def cmd_preprocess(args: argparse.Namespace):
    cfg = _load(args)
    summary = preprocess(cfg.manifest_path.resolve(), cfg.cache_path, cfg.windowing,
                         cfg.speech.preprocess_buffers, settings.JOINT_TABLE, cfg.n_jobs)
    cfg.dump(cfg.cache_path)
    print(f"preprocess: {summary.line()}")
    return summary


def cmd_train(args: argparse.Namespace):
    cfg = _load(args)
    variant = FusionVariant(args.variant)
    buffer_ms = args.buffer_ms if args.buffer_ms is not None else cfg.speech.buffer_ms
    if buffer_ms not in cfg.speech.preprocess_buffers:
        raise ConfigError(f"buffer {buffer_ms} ms is not among speech.preprocess_buffers")
    corpus = _open_corpus(cfg)
    folds = _folds(cfg, corpus)
    fold_indices = cfg.fold_indices() if args.all_folds or args.fold is None else [args.fold]

    results = train(corpus, folds, fold_indices, cfg.model_config(variant), cfg.train_config(),
                    buffer_ms, cfg.output_path)
    cfg.dump(cfg.output_path / "runs" / variant.value / f"buffer_{buffer_ms}")
    for r in results:
        print(f"train: {variant.value} fold {r.fold} best epoch {r.best_epoch} "
              f"val MAP {100 * r.best_val_map:.1f} -> {r.checkpoint}")
    return results


def _parse_ensemble(value: Optional[str]) -> Optional[Tuple[FusionVariant, FusionVariant]]:
    if not value:
        return None
    parts = value.split("+")
    if len(parts) != 2:
        raise ConfigError(f"--ensemble expects two variants joined by '+', got {value!r}")
    try:
        return FusionVariant(parts[0]), FusionVariant(parts[1])
    except ValueError as e:
        raise ConfigError(f"--ensemble: {e}") from None


def cmd_eval(args: argparse.Namespace) -> List[MetricReport]:
    cfg = _load(args)
    variants = [FusionVariant(v) for v in (args.variant or cfg.evaluation.variants)]
    buffers = list(args.buffer_ms or cfg.evaluation.buffers_ms)
    ensemble = _parse_ensemble(args.ensemble)
    main_buffer = buffers[0]
    if ensemble:
        variants += [v for v in ensemble if v not in variants]

    corpus = _open_corpus(cfg)
    folds = _folds(cfg, corpus)
    fold_indices = cfg.fold_indices()
    out = _eval_dir(cfg)
    cfg.dump(out)

    by_key: Dict[tuple, MetricReport] = {}
    per_fold: Dict[tuple, Dict[int, PredictionSet]] = {}
    for variant in variants:
        for b in buffers:
            report, preds = cross_validate(corpus, folds, fold_indices, variant, b, cfg.output_path,
                                           cfg.evaluation.batch_size, cfg.evaluation.threshold)
            report.write(out / variant.value / f"buffer_{b}")
            by_key[(variant.value, b)] = report
            per_fold[(variant.value, b)] = preds

    reports = [by_key[(v.value, main_buffer)] for v in variants]
    reference = per_fold[(variants[0].value, main_buffer)]
    baselines = {
        "random": {f: random_baseline(p, cfg.evaluation.baseline_seed + f) for f, p in reference.items()},
        "majority": {f: majority_baseline(p) for f, p in reference.items()},
    }
    for name, preds in baselines.items():
        report = MetricReport.from_predictions(name, preds, cfg.evaluation.threshold)
        report.write(out / name)
        reports.append(report)

    if ensemble:
        a, b = (per_fold[(v.value, main_buffer)] for v in ensemble)
        combined = {f: ensemble_average(a[f], b[f]) for f in fold_indices}
        report = MetricReport.from_predictions("ensemble", combined, cfg.evaluation.threshold)
        ens_dir = report.write(out / "ensemble")
        pooled_a, pooled_b = PredictionSet.concat(list(a.values())), PredictionSet.concat(list(b.values()))
        PredictionSet.concat(list(combined.values())).to_csv(ens_dir / "predictions.csv")
        comparison = {
            "models": [v.value for v in ensemble],
            "agreement": prediction_agreement(pooled_a, pooled_b, cfg.evaluation.threshold),
            "mann_whitney": asdict(analysis.compare_confidences(pooled_a, pooled_b)),
        }
        (ens_dir / "comparison.json").write_text(json.dumps(comparison, indent=2) + "\n", encoding="utf-8")
        reports.append(report)

    table = summary_table(reports)
    table.to_csv(out / "summary.csv", index=False, lineterminator="\n")
    (out / "summary.txt").write_text("\n\n".join(r.to_text() for r in reports) + "\n", encoding="utf-8")
    if len(buffers) > 1:
        map_by_buffer_table(by_key).to_csv(out / "map_by_buffer.csv", index=False, float_format="%.4f",
                                           lineterminator="\n")
    print(table.to_string(index=False))
    return reports


def cmd_analyze(args: argparse.Namespace) -> Dict[str, object]:
    cfg = _load(args)
    corpus = _open_corpus(cfg)
    folds = _folds(cfg, corpus)
    buffer_ms = cfg.speech.buffer_ms
    out = cfg.output_path / "analysis"
    cfg.dump(out)

    samples = analysis.sample_balanced_windows(corpus, cfg.seed, cfg.analysis, cfg.n_jobs)
    samples.to_csv(out / "balanced_samples.csv")
    samples.bin_counts().to_csv(out / "bin_counts.csv", lineterminator="\n")
    analysis.feature_distribution_table(samples).to_csv(out / "feature_distribution.csv", index=False,
                                                        float_format="%.6g", lineterminator="\n")
    summary: Dict[str, object] = {"n_gesture": samples.n_gesture, "n_neutral": samples.n_neutral}

    predictions = {}
    for name in cfg.analysis.models:
        preds = _pooled_predictions(cfg, name, buffer_ms)
        if preds is None:
            logger.warning(f"No predictions for {name} at buffer {buffer_ms} ms, run eval first")
        else:
            predictions[name] = preds
    if predictions and len(samples):
        analysis.confidence_feature_correlation(predictions, samples).to_csv(
            out / "confidence_correlation.csv", index=False, float_format="%.6g", lineterminator="\n")

    checkpoint = run_dir(cfg.output_path, FusionVariant.SPEECH, buffer_ms, cfg.fold_indices()[0]) / "model.pt"
    if checkpoint.exists():
        summary["gradcam"] = _gradcam_gallery(cfg, corpus, folds, checkpoint, out / "gradcam")
    else:
        logger.warning(f"No speech-only checkpoint at {checkpoint}, skipping Grad-CAM")

    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str) + "\n", encoding="utf-8")
    print(f"analyze: {samples.n_gesture} gesture / {samples.n_neutral} neutral windows -> {out}")
    return summary


def _gradcam_gallery(cfg: ExperimentConfig, corpus: PreprocessedCorpus, folds: FoldAssignment,
                     checkpoint: Path, out: Path) -> Dict[str, object]:
    """Overlays for gesture windows of the checkpoint's test fold plus a gesture/neutral activation table."""
    fold = cfg.fold_indices()[0]
    model, _ = load_checkpoint(checkpoint, corpus.adjacency)
    windows = corpus.sequence_windows()
    test = windows[windows["dialogue_id"].isin(folds.dialogues_in(fold))]
    n = cfg.analysis.gradcam_examples
    picked = pd.concat([test[test["label"] == int(Label.GESTURE)].head(n),
                        test[test["label"] == int(Label.NEUTRAL)].head(n)])
    audio = _WindowAudio(corpus, cfg.speech.buffer_ms)

    items = []
    out.mkdir(parents=True, exist_ok=True)
    for w in picked.itertuples(index=False):
        samples = audio(w.speaker_id, int(w.start_frame))
        mel = mel_spectrogram(samples, audio.scfg.total_ms)
        items.append((w.window_id, int(w.label), mel.values))
        if w.label == int(Label.GESTURE):
            heat = analysis.grad_cam(model, mel.values, layer_index=cfg.analysis.gradcam_layer)
            svg = plots.f0_overlay_plot(mel, estimate_f0(samples), heat)
            (out / f"{_safe_name(w.window_id)}.svg").write_text(svg, encoding="utf-8")

    table = analysis.gradcam_activation_table(model, items, cfg.analysis.gradcam_layer)
    table.to_csv(out / "activation.csv", index=False, float_format="%.6g", lineterminator="\n")
    stat = analysis.compare_activations(table)
    return {"fold": fold, "n_windows": len(table), "welch": asdict(stat) if stat else None}


def cmd_plot(args: argparse.Namespace) -> List[Path]:
    cfg = _load(args)
    out = cfg.output_path / "plots"
    cfg.dump(out)
    written: List[Path] = []
    buffer_ms = cfg.evaluation.buffers_ms[0]

    predictions = {}
    for v in cfg.evaluation.variants:
        preds = _pooled_predictions(cfg, v, buffer_ms)
        if preds is not None:
            predictions[v] = preds
    ensemble_path = _eval_dir(cfg) / "ensemble" / "predictions.csv"
    if ensemble_path.exists():
        predictions["ensemble"] = PredictionSet.from_csv(ensemble_path)
    if predictions:
        path = out / "curves.svg"
        path.write_text(plots.curves_plot(predictions), encoding="utf-8")
        written.append(path)
    else:
        logger.warning("No evaluated predictions found, skipping curve plots")

    table_path = _eval_dir(cfg) / "map_by_buffer.csv"
    if table_path.exists():
        path = out / "map_by_buffer.svg"
        path.write_text(plots.map_by_buffer_plot(pd.read_csv(table_path)), encoding="utf-8")
        written.append(path)

    corpus = _open_corpus(cfg)
    audio = _WindowAudio(corpus, cfg.speech.buffer_ms)
    windows = corpus.sequence_windows()
    for w in windows[windows["label"] == int(Label.GESTURE)].head(cfg.analysis.gradcam_examples).itertuples(index=False):
        samples = audio(w.speaker_id, int(w.start_frame))
        path = out / "f0" / f"{_safe_name(w.window_id)}.svg"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(plots.f0_overlay_plot(mel_spectrogram(samples, audio.scfg.total_ms), estimate_f0(samples)),
                        encoding="utf-8")
        written.append(path)
    print(f"plot: {len(written)} figure(s) -> {out}")
    return written


# ----------------------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment YAML (default: shipped default_experiment.yaml)")
    p.add_argument("--seed", type=int, help="override experiment seed")
    p.add_argument("--jobs", type=int, help="cap on worker processes")
    p.add_argument("--output-dir", dest="output_dir", help="override output_dir")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE", help="override any config key")


def register(subparsers) -> None:
    p = subparsers.add_parser("synth", help="write a seeded synthetic corpus")
    _common(p)
    p.add_argument("--force", action="store_true", help="replace a non-empty corpus directory")
    p.set_defaults(handler=cmd_synth)

    p = subparsers.add_parser("preprocess", help="window, label and cache model inputs")
    _common(p)
    p.set_defaults(handler=cmd_preprocess)

    p = subparsers.add_parser("train", help="train one variant on one or all folds")
    _common(p)
    p.add_argument("--variant", required=True, choices=[v.value for v in FusionVariant])
    p.add_argument("--fold", type=int)
    p.add_argument("--all-folds", action="store_true")
    p.add_argument("--buffer-ms", dest="buffer_ms", type=int)
    p.set_defaults(handler=cmd_train)

    p = subparsers.add_parser("eval", help="cross-validated metrics, baselines and ensembles")
    _common(p)
    p.add_argument("--variant", action="append", choices=[v.value for v in FusionVariant])
    p.add_argument("--buffer-ms", dest="buffer_ms", type=int, action="append")
    p.add_argument("--ensemble", help="two variants to average, e.g. early+cross")
    p.set_defaults(handler=cmd_eval)

    p = subparsers.add_parser("analyze", help="feature statistics, confidence correlations, Grad-CAM")
    _common(p)
    p.set_defaults(handler=cmd_analyze)

    p = subparsers.add_parser("plot", help="PR/ROC curves, MAP by buffer, F0 overlays")
    _common(p)
    p.set_defaults(handler=cmd_plot)
