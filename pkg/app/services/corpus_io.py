"""
Recording loaders:
- WAV audio -> mono 16 kHz AudioTrack
- per-frame 133-joint keypoints (CSV) -> KeypointTrack, gaps filled from the previous frame
- stroke annotations (CSV) -> sorted, per-speaker merged StrokeAnnotation list
- corpus manifest read/write
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import soundfile as sf
from scipy.signal import resample_poly

from app.core.errors import FormatError, InputError

logger = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 16000
FRAME_RATE_FPS = 29.97
N_KEYPOINTS = 133

SUPPORTED_SUBTYPES = {"PCM_U8", "PCM_16", "PCM_24", "FLOAT"}
MANIFEST_COLUMNS = ["dialogue_id", "speaker_id", "audio_path", "keypoint_path", "annotation_path"]
ANNOTATION_COLUMNS = ["speaker_id", "start_ms", "end_ms"]


@dataclass(frozen=True)
class AudioTrack:
    samples: np.ndarray
    sample_rate_hz: int
    speaker_id: str

    @property
    def duration_ms(self) -> int:
        return int(round(1000 * len(self.samples) / self.sample_rate_hz))


@dataclass(frozen=True)
class KeypointTrack:
    """frames: (n_frames, 133, 3) array of x, y, confidence."""
    frames: np.ndarray
    frame_rate_fps: float
    speaker_id: str
    gap_frames: tuple = ()

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.n_frames / self.frame_rate_fps


@dataclass(frozen=True)
class StrokeAnnotation:
    speaker_id: str
    start_ms: int
    end_ms: int

    def __post_init__(self):
        if self.end_ms <= self.start_ms:
            raise FormatError(f"stroke end {self.end_ms} <= start {self.start_ms} ({self.speaker_id})")

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


@dataclass(frozen=True)
class ManifestEntry:
    dialogue_id: str
    speaker_id: str
    audio_path: Path
    keypoint_path: Path
    annotation_path: Path


def load_audio(path: str | Path, speaker_id: Optional[str] = None) -> AudioTrack:
    """Read a PCM/float WAV, average channels, resample to 16 kHz, keep peak <= 1."""
    path = Path(path)
    try:
        info = sf.info(str(path))
    except Exception as e:
        raise InputError(f"cannot read audio file {path}: {e}") from e

    if info.subtype not in SUPPORTED_SUBTYPES:
        raise FormatError(f"unsupported WAV encoding {info.subtype} in {path}")
    if info.channels not in (1, 2):
        raise FormatError(f"expected 1 or 2 channels, found {info.channels} in {path}")
    if info.frames == 0:
        raise InputError(f"audio file {path} has no samples")

    samples, rate = sf.read(str(path), dtype="float64", always_2d=True)
    samples = samples.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise FormatError(f"non-finite samples in {path}")

    if rate != SAMPLE_RATE_HZ:
        g = gcd(int(rate), SAMPLE_RATE_HZ)
        samples = resample_poly(samples, SAMPLE_RATE_HZ // g, int(rate) // g)
        logger.info(f"Resampled {path.name} from {rate} Hz to {SAMPLE_RATE_HZ} Hz")

    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak

    return AudioTrack(samples=samples.astype(np.float64), sample_rate_hz=SAMPLE_RATE_HZ,
                      speaker_id=speaker_id or path.stem)


def save_audio(path: str | Path, track: AudioTrack) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), track.samples, track.sample_rate_hz, subtype="PCM_16")


def keypoint_columns() -> List[str]:
    cols = ["frame"]
    for j in range(N_KEYPOINTS):
        cols += [f"j{j}_x", f"j{j}_y", f"j{j}_c"]
    return cols


def load_keypoints(path: str | Path, speaker_id: Optional[str] = None,
                   frame_rate_fps: float = FRAME_RATE_FPS) -> KeypointTrack:
    """
    Read one record per frame: frame index followed by 133 x (x, y, confidence).
    Missing frame indices are filled by repeating the previous frame.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=keypoint_columns())
    except pd.errors.ParserError as e:
        raise FormatError(f"malformed keypoint record in {path}: {e}") from e
    except OSError as e:
        raise InputError(f"cannot read keypoint file {path}: {e}") from e

    n_values = df.shape[1] - 1
    if n_values != 3 * N_KEYPOINTS:
        raise FormatError(f"{path}: expected {N_KEYPOINTS} joints per frame, header has {n_values / 3:g}")
    if df.empty:
        return KeypointTrack(np.zeros((0, N_KEYPOINTS, 3)), frame_rate_fps, speaker_id or path.stem)

    values = df.iloc[:, 1:].to_numpy(dtype=np.float64)
    bad_rows = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad_rows.size:
        frame_no = df.iloc[bad_rows[0], 0]
        raise FormatError(f"{path}: frame {frame_no} does not carry {N_KEYPOINTS} complete joints")

    indices = df.iloc[:, 0].to_numpy(dtype=np.int64)
    if np.any(indices < 0):
        raise FormatError(f"{path}: negative frame index")
    order = np.argsort(indices, kind="stable")
    indices, values = indices[order], values[order].reshape(-1, N_KEYPOINTS, 3)

    conf = values[..., 2]
    if np.any((conf < 0) | (conf > 1)):
        logger.warning(f"{path.name}: confidences outside [0, 1] clipped")
        values[..., 2] = np.clip(conf, 0.0, 1.0)

    n_frames = int(indices[-1]) + 1
    frames = np.empty((n_frames, N_KEYPOINTS, 3), dtype=np.float64)
    present = np.zeros(n_frames, dtype=bool)
    frames[indices] = values
    present[indices] = True

    gaps = []
    last = values[0]
    for i in range(n_frames):
        if present[i]:
            last = frames[i]
        else:
            frames[i] = last
            gaps.append(i)
    if gaps:
        logger.info(f"{path.name}: filled {len(gaps)} missing frame(s) by repeating the previous frame: {gaps[:10]}")

    return KeypointTrack(frames=frames, frame_rate_fps=frame_rate_fps,
                         speaker_id=speaker_id or path.stem, gap_frames=tuple(gaps))


def save_keypoints(path: str | Path, track: KeypointTrack) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    flat = track.frames.reshape(track.n_frames, -1)
    df = pd.DataFrame(flat, columns=keypoint_columns()[1:])
    df.insert(0, "frame", np.arange(track.n_frames))
    df.to_csv(path, index=False, float_format="%.3f", lineterminator="\n")


def merge_strokes(strokes: Sequence[StrokeAnnotation]) -> tuple[List[StrokeAnnotation], int]:
    """Union overlapping strokes of the same speaker; returns (merged, merge count)."""
    merged: List[StrokeAnnotation] = []
    n_merges = 0
    by_speaker: dict[str, List[StrokeAnnotation]] = {}
    for s in strokes:
        by_speaker.setdefault(s.speaker_id, []).append(s)
    for speaker, items in by_speaker.items():
        current: Optional[StrokeAnnotation] = None
        for s in sorted(items, key=lambda s: (s.start_ms, s.end_ms)):
            if current is not None and s.start_ms < current.end_ms:
                current = StrokeAnnotation(speaker, current.start_ms, max(current.end_ms, s.end_ms))
                n_merges += 1
            else:
                if current is not None:
                    merged.append(current)
                current = s
        if current is not None:
            merged.append(current)
    return sorted(merged, key=lambda s: (s.start_ms, s.speaker_id)), n_merges


def load_annotations(path: str | Path) -> List[StrokeAnnotation]:
    """Read speaker_id,start_ms,end_ms rows; output sorted by start, merged per speaker."""
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"speaker_id": str})
    except pd.errors.EmptyDataError:
        return []
    except OSError as e:
        raise InputError(f"cannot read annotation file {path}: {e}") from e

    missing = [c for c in ANNOTATION_COLUMNS if c not in df.columns]
    if missing:
        raise FormatError(f"{path}: missing columns {missing}")

    strokes = []
    for row in df[ANNOTATION_COLUMNS].itertuples(index=False):
        try:
            start, end = int(row.start_ms), int(row.end_ms)
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}: non-integer stroke bounds {row}") from e
        strokes.append(StrokeAnnotation(str(row.speaker_id), start, end))

    merged, n_merges = merge_strokes(strokes)
    if n_merges:
        logger.info(f"{path.name}: merged {n_merges} overlapping stroke(s)")
    return merged


def save_annotations(path: str | Path, strokes: Sequence[StrokeAnnotation]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame([(s.speaker_id, s.start_ms, s.end_ms) for s in strokes], columns=ANNOTATION_COLUMNS)
    df.to_csv(path, index=False, lineterminator="\n")


def strokes_for_speaker(strokes: Sequence[StrokeAnnotation], speaker_id: str) -> List[StrokeAnnotation]:
    return [s for s in strokes if s.speaker_id == speaker_id]


def read_manifest(path: str | Path) -> List[ManifestEntry]:
    """Manifest paths are relative to the manifest's directory unless absolute."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    df = pd.read_csv(path, dtype=str)
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise FormatError(f"{path}: missing manifest columns {missing}")
    base = path.parent

    def _resolve(p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    return [
        ManifestEntry(row.dialogue_id, row.speaker_id, _resolve(row.audio_path),
                      _resolve(row.keypoint_path), _resolve(row.annotation_path))
        for row in df.itertuples(index=False)
    ]


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    base = path.parent

    def _rel(p: Path) -> str:
        p = Path(p)
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    rows = [(e.dialogue_id, e.speaker_id, _rel(e.audio_path), _rel(e.keypoint_path), _rel(e.annotation_path))
            for e in entries]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False, lineterminator="\n")
