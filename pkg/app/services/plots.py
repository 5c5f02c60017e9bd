"""
SVG figures: F0 contours over Mel spectrograms, PR/ROC curves and MAP by speech buffer.

Every plotting function returns the SVG document as a string; callers decide where it goes.
"""
from __future__ import annotations

import io
import logging
from typing import Dict, Optional

import librosa
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from app.core.errors import ContractError  # noqa: E402
from app.services.evaluation import average_precision, pr_curve, roc_auc, roc_curve  # noqa: E402
from app.services.predictions import PredictionSet  # noqa: E402
from app.services.speech_features import MEL_FMAX_HZ, MEL_FMIN_HZ, F0Track, MelSpectrogram  # noqa: E402

logger = logging.getLogger(__name__)

matplotlib.rcParams.update({"font.family": "DejaVu Sans", "axes.unicode_minus": False, "svg.hashsalt": "gesture"})

F0_CONTOUR_GID = "f0-contour"


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def hz_to_mel_bin(f_hz: np.ndarray, n_mels: int) -> np.ndarray:
    """Fractional Mel-band index of each frequency on the HTK scale (band centers at 0..n_mels-1)."""
    lo, hi = librosa.hz_to_mel([MEL_FMIN_HZ, MEL_FMAX_HZ], htk=True)
    mel = librosa.hz_to_mel(np.asarray(f_hz, dtype=np.float64), htk=True)
    return (mel - lo) / (hi - lo) * (n_mels + 1) - 1.0


def f0_overlay_figure(mel: MelSpectrogram, f0_track: F0Track, heatmap: Optional[np.ndarray] = None):
    """Spectrogram raster, optional Grad-CAM layer and the F0 contour on one time axis (ms)."""
    if heatmap is not None and np.shape(heatmap) != mel.values.shape:
        raise ContractError(f"heatmap shape {np.shape(heatmap)} != spectrogram shape {mel.values.shape}")
    duration_ms = mel.n_frames * mel.hop_ms
    extent = (0.0, float(duration_ms), -0.5, mel.n_mels - 0.5)

    fig, ax = plt.subplots(figsize=(8, 3.6), constrained_layout=True)
    ax.imshow(mel.values, origin="lower", aspect="auto", extent=extent, cmap="magma")
    if heatmap is not None:
        ax.imshow(heatmap, origin="lower", aspect="auto", extent=extent, cmap="jet", alpha=0.45, vmin=0, vmax=1)

    # NaN (unvoiced) frames break the polyline
    times = np.linspace(0.0, float(duration_ms), len(f0_track)) if len(f0_track) > 1 else np.zeros(len(f0_track))
    line, = ax.plot(times, hz_to_mel_bin(f0_track.f0_hz, mel.n_mels), color="cyan", linewidth=1.5, label="F0")
    line.set_gid(F0_CONTOUR_GID)

    ax.set_xlim(extent[0], extent[1])
    ax.set_ylim(extent[2], extent[3])
    ax.set_xlabel("Time (ms)")
    ax.set_ylabel("Mel band")
    ax.legend(loc="upper right", fontsize=8)
    return fig


def f0_overlay_plot(mel: MelSpectrogram, f0_track: F0Track, heatmap: Optional[np.ndarray] = None) -> str:
    return _svg(f0_overlay_figure(mel, f0_track, heatmap))


def curves_plot(predictions: Dict[str, PredictionSet]) -> str:
    """PR and ROC curves of every model side by side; models without both classes are skipped."""
    fig, (ax_pr, ax_roc) = plt.subplots(1, 2, figsize=(10, 4), constrained_layout=True)
    for name, preds in predictions.items():
        pr, roc = pr_curve(preds), roc_curve(preds)
        if pr is None or roc is None:
            logger.warning(f"{name}: single-class predictions, no curves drawn")
            continue
        ax_pr.step(pr.x, pr.y, where="post", label=f"{name} (AP {100 * average_precision(preds):.1f})")
        ax_roc.plot(roc.x, roc.y, label=f"{name} (AUC {100 * roc_auc(preds):.1f})")
    ax_roc.plot([0, 1], [0, 1], color="grey", linestyle="--", linewidth=0.8)
    for ax, (xl, yl, title) in zip((ax_pr, ax_roc), (("Recall", "Precision", "Precision-recall"),
                                                     ("False positive rate", "True positive rate", "ROC"))):
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best", fontsize=8)
    return _svg(fig)


def map_by_buffer_plot(table: pd.DataFrame) -> str:
    """Grouped bars of MAP (percent) per variant, one bar per speech buffer."""
    fig, ax = plt.subplots(figsize=(8, 4), constrained_layout=True)
    variants = sorted(table["variant"].unique()) if len(table) else []
    buffers = sorted(table["buffer_ms"].unique()) if len(table) else []
    width = 0.8 / max(len(buffers), 1)
    x = np.arange(len(variants))
    for i, b in enumerate(buffers):
        sub = table[table["buffer_ms"] == b].set_index("variant").reindex(variants)
        ax.bar(x + i * width, sub["map"].fillna(0.0), width, yerr=sub["map_std"].fillna(0.0),
               capsize=3, label=f"{b} ms")
    ax.set_xticks(x + width * (len(buffers) - 1) / 2)
    ax.set_xticklabels(variants)
    ax.set_ylabel("MAP (%)")
    ax.set_title("MAP by speech buffer")
    if buffers:
        ax.legend(title="buffer", fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    return _svg(fig)
