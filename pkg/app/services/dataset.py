"""
Preprocessing: manifest -> labeled windows, sequences and cached model inputs.

Cache directory layout:
    windows.csv              one row per window (all windows, in track order)
    sequences.csv            one row per 40-window sequence, first_row points into the arrays
    window_index/<dialogue>.csv
    pose.bin/.json           (N, 3, 15, 27) float32
    labels.bin/.json         (N,) int64
    mel_<buffer>.bin/.json   (N, 64, T(500 + buffer)) float32, one per cached buffer
    summary.json
"""
from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from app.core.errors import ConfigError, InputError
from app.services import feature_cache
from app.services.corpus_io import (
    ManifestEntry,
    load_annotations,
    load_audio,
    load_keypoints,
    read_manifest,
    strokes_for_speaker,
)
from app.services.pose_graph import JointSelection, build_adjacency, pose_window
from app.services.speech_features import N_MELS, SpeechWindowConfig, extract_window_audio, mel_spectrogram
from app.services.windowing import (
    Label,
    SequenceSample,
    TimeWindow,
    WindowingConfig,
    build_sequences,
    gesture_prevalence,
    windows_for_track,
    write_window_index,
)

logger = logging.getLogger(__name__)

WINDOW_COLUMNS = ["window_id", "dialogue_id", "speaker_id", "start_frame", "label", "overlap_fraction",
                  "sequence_index"]


def window_id(speaker_id: str, start_frame: int) -> str:
    return f"{speaker_id}@{start_frame}"


@dataclass
class TrackResult:
    dialogue_id: str
    speaker_id: str
    windows: List[TimeWindow]
    pose: np.ndarray
    mels: Dict[int, np.ndarray]
    n_flagged: int
    n_gap_frames: int


@dataclass
class PreprocessSummary:
    n_tracks: int = 0
    n_windows: int = 0
    n_sequences: int = 0
    n_sequence_windows: int = 0
    gesture_prevalence: float = 0.0
    n_flagged_pose_windows: int = 0
    n_gap_frames: int = 0
    buffers_ms: List[int] = field(default_factory=list)
    manifest: str = ""
    joint_table: str = ""
    fps: float = 0.0
    sequence_length: int = 40

    def line(self) -> str:
        return (f"windows={self.n_windows} sequences={self.n_sequences} "
                f"gesture_prevalence={100 * self.gesture_prevalence:.1f}%")


def _process_track(job: Tuple[ManifestEntry, WindowingConfig, Tuple[int, ...], str]) -> TrackResult:
    entry, wcfg, buffers, joint_table = job
    selection = JointSelection.from_table(joint_table)
    keypoints = load_keypoints(entry.keypoint_path, entry.speaker_id, wcfg.fps)
    audio = load_audio(entry.audio_path, entry.speaker_id)
    strokes = strokes_for_speaker(load_annotations(entry.annotation_path), entry.speaker_id)

    windows = windows_for_track(entry.speaker_id, keypoints.n_frames, strokes, wcfg.fps, wcfg.stride)
    pose = np.zeros((len(windows), 3, wcfg.window_frames, len(selection.indices)), dtype=np.float32)
    n_flagged = 0
    for i, w in enumerate(windows):
        pw = pose_window(keypoints, w.start_frame, selection)
        pose[i] = pw.values
        n_flagged += pw.flagged

    mels = {}
    for b in buffers:
        scfg = SpeechWindowConfig(buffer_ms=b)
        arr = np.zeros((len(windows), N_MELS, scfg.n_frames), dtype=np.float32)
        for i, w in enumerate(windows):
            samples = extract_window_audio(audio, w.start_frame, scfg, wcfg.fps)
            arr[i] = mel_spectrogram(samples, scfg.total_ms).values
        mels[b] = arr
    return TrackResult(entry.dialogue_id, entry.speaker_id, windows, pose, mels, n_flagged, len(keypoints.gap_frames))


CACHE_ARRAYS = ("pose", "labels")


def clear_cache(cache_dir: Path) -> None:
    """Remove every preprocessing output under cache_dir; summary.json goes first."""
    (cache_dir / "summary.json").unlink(missing_ok=True)
    for name in ("windows.csv", "sequences.csv"):
        (cache_dir / name).unlink(missing_ok=True)
    shutil.rmtree(cache_dir / "window_index", ignore_errors=True)
    for stem in (*CACHE_ARRAYS, "mel_*"):
        for path in [*cache_dir.glob(f"{stem}.bin"), *cache_dir.glob(f"{stem}.json")]:
            path.unlink(missing_ok=True)


def preprocess(manifest_path: str | Path, cache_dir: str | Path, wcfg: WindowingConfig,
               buffers_ms: Sequence[int], joint_table: str | Path, jobs: int = 1) -> PreprocessSummary:
    """Window, label and featurize every manifest track; tracks run in up to `jobs` worker processes.

    A failure part way leaves no cache behind: partial arrays and tables are removed before the error propagates.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    entries = sorted(read_manifest(manifest_path), key=lambda e: (e.dialogue_id, e.speaker_id))
    if not entries:
        raise InputError(f"manifest {manifest_path} lists no tracks")
    buffers = tuple(sorted(set(int(b) for b in buffers_ms)))
    for b in buffers:
        SpeechWindowConfig(buffer_ms=b)

    clear_cache(cache_dir)
    try:
        summary = _write_cache(entries, cache_dir, wcfg, buffers, joint_table, jobs)
        summary.manifest = str(manifest_path)
    except BaseException:
        logger.error(f"Preprocessing into {cache_dir} failed, removing partial outputs")
        clear_cache(cache_dir)
        raise

    (cache_dir / "summary.json").write_text(json.dumps(summary.__dict__, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Preprocessed {summary.n_tracks} tracks: {summary.line()}")
    return summary


def _write_cache(entries: List[ManifestEntry], cache_dir: Path, wcfg: WindowingConfig, buffers: Tuple[int, ...],
                 joint_table: str | Path, jobs: int) -> PreprocessSummary:
    jobs_list = [(e, wcfg, buffers, str(joint_table)) for e in entries]
    n_sel = len(JointSelection.from_table(joint_table).indices)

    window_rows, sequence_rows = [], []
    all_windows: List[TimeWindow] = []
    by_dialogue: Dict[str, List[TimeWindow]] = {}
    summary = PreprocessSummary(buffers_ms=list(buffers), joint_table=str(joint_table), fps=wcfg.fps,
                                sequence_length=wcfg.sequence_length)
    with ExitStack() as stack:
        pool = stack.enter_context(ProcessPoolExecutor(max_workers=jobs)) if jobs > 1 else None
        pose_writer = stack.enter_context(feature_cache.ArrayWriter(
            cache_dir, "pose", (3, wcfg.window_frames, n_sel), "float32",
            "normalized pose windows: channels x, y, confidence"))
        label_writer = stack.enter_context(feature_cache.ArrayWriter(
            cache_dir, "labels", (), "int64", "window labels, 1 = gesture"))
        mel_writers = {b: stack.enter_context(feature_cache.ArrayWriter(
                           cache_dir, f"mel_{b}", (N_MELS, SpeechWindowConfig(buffer_ms=b).n_frames), "float32",
                           f"log-Mel spectrograms, {500 + b} ms speech windows"))
                       for b in buffers}

        row = 0
        for r in (pool.map(_process_track, jobs_list) if pool else map(_process_track, jobs_list)):
            pose_writer.append(r.pose)
            label_writer.append(np.array([int(w.label) for w in r.windows], dtype=np.int64))
            for b in buffers:
                mel_writers[b].append(r.mels[b])

            sequences = build_sequences(r.windows, r.dialogue_id, wcfg.sequence_length)
            n_in_sequences = len(sequences) * wcfg.sequence_length
            for i, w in enumerate(r.windows):
                seq_index = i // wcfg.sequence_length if i < n_in_sequences else -1
                window_rows.append((window_id(w.speaker_id, w.start_frame), r.dialogue_id, w.speaker_id,
                                    w.start_frame, int(w.label), w.overlap_fraction, seq_index))
            for s in sequences:
                sequence_rows.append((r.dialogue_id, r.speaker_id, s.sequence_index,
                                      row + s.sequence_index * wcfg.sequence_length, int(s.has_gesture)))
            row += len(r.windows)

            all_windows += r.windows
            by_dialogue.setdefault(r.dialogue_id, []).extend(r.windows)
            summary.n_tracks += 1
            summary.n_sequences += len(sequences)
            summary.n_sequence_windows += n_in_sequences
            summary.n_flagged_pose_windows += r.n_flagged
            summary.n_gap_frames += r.n_gap_frames

    pd.DataFrame(window_rows, columns=WINDOW_COLUMNS).to_csv(cache_dir / "windows.csv", index=False,
                                                             lineterminator="\n")
    pd.DataFrame(sequence_rows, columns=["dialogue_id", "speaker_id", "sequence_index", "first_row", "has_gesture"]) \
        .to_csv(cache_dir / "sequences.csv", index=False, lineterminator="\n")
    for dialogue, windows in by_dialogue.items():
        write_window_index(cache_dir / "window_index" / f"{dialogue}.csv", windows, wcfg.sequence_length)

    summary.n_windows = len(all_windows)
    summary.gesture_prevalence = gesture_prevalence(all_windows)
    if summary.n_flagged_pose_windows:
        logger.warning(f"{summary.n_flagged_pose_windows} pose window(s) had no confident shoulders "
                       f"or a degenerate shoulder distance and were left unnormalized")
    return summary


class PreprocessedCorpus:
    """Read access to a preprocessing cache: sequences, labels and batched model inputs."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        summary_path = self.root / "summary.json"
        if not summary_path.exists():
            raise ConfigError(f"no preprocessed corpus under {self.root} (run preprocess first)")
        self.summary = json.loads(summary_path.read_text(encoding="utf-8"))
        self.windows = pd.read_csv(self.root / "windows.csv",
                                   dtype={"window_id": str, "dialogue_id": str, "speaker_id": str})
        seq_df = pd.read_csv(self.root / "sequences.csv", dtype={"dialogue_id": str, "speaker_id": str})
        self.selection = JointSelection.from_table(self.summary["joint_table"])
        self.adjacency = build_adjacency(self.selection).A_norm
        self.sequence_length = int(self.summary.get("sequence_length", 40))

        self._first_row: Dict[str, int] = {}
        self.sequences: List[SequenceSample] = []
        for r in seq_df.itertuples(index=False):
            rows = self.windows.iloc[int(r.first_row):int(r.first_row) + self.sequence_length]
            windows = tuple(TimeWindow(w.speaker_id, int(w.start_frame), Label(int(w.label)), float(w.overlap_fraction))
                            for w in rows.itertuples(index=False))
            seq = SequenceSample(windows, r.dialogue_id, int(r.sequence_index))
            self._first_row[seq.key] = int(r.first_row)
            self.sequences.append(seq)
        self._arrays: Dict[str, np.ndarray] = {}

    @classmethod
    def open(cls, root: str | Path) -> "PreprocessedCorpus":
        return cls(root)

    @property
    def buffers_ms(self) -> List[int]:
        return list(self.summary["buffers_ms"])

    def _array(self, name: str) -> np.ndarray:
        if name not in self._arrays:
            self._arrays[name] = feature_cache.load_array(self.root, name)
        return self._arrays[name]

    def dialogues(self) -> List[str]:
        return sorted(set(s.dialogue_id for s in self.sequences))

    def sequences_for(self, dialogue_ids: Sequence[str]) -> List[SequenceSample]:
        wanted = set(dialogue_ids)
        return [s for s in self.sequences if s.dialogue_id in wanted]

    def rows(self, seq: SequenceSample) -> np.ndarray:
        first = self._first_row[seq.key]
        return np.arange(first, first + len(seq.windows))

    def window_ids(self, seq: SequenceSample) -> List[str]:
        return [window_id(w.speaker_id, w.start_frame) for w in seq.windows]

    def tensors(self, seqs: Sequence[SequenceSample], buffer_ms: int, pose: bool = True,
                mel: bool = True) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor], torch.Tensor]:
        """(pose (B, n, 3, 15, 27) | None, mel (B, n, 64, T) | None, labels (B, n))."""
        if mel and buffer_ms not in self.buffers_ms:
            raise ConfigError(f"buffer {buffer_ms} ms not cached (available: {self.buffers_ms})")
        idx = np.stack([self.rows(s) for s in seqs])
        B, n = idx.shape
        flat = idx.reshape(-1)
        labels = torch.from_numpy(np.asarray(self._array("labels")[flat]).reshape(B, n).astype(np.int64))
        pose_t = mel_t = None
        if pose:
            p = np.asarray(self._array("pose")[flat])
            pose_t = torch.from_numpy(p.reshape(B, n, *p.shape[1:]).copy())
        if mel:
            m = np.asarray(self._array(f"mel_{buffer_ms}")[flat])
            mel_t = torch.from_numpy(m.reshape(B, n, *m.shape[1:]).copy())
        return pose_t, mel_t, labels

    def sequence_windows(self) -> pd.DataFrame:
        """Windows that belong to a sequence (the evaluated set)."""
        return self.windows[self.windows["sequence_index"] >= 0].reset_index(drop=True)

    def manifest(self) -> List[ManifestEntry]:
        return read_manifest(self.summary["manifest"])
