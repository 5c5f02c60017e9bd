from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
import soundfile as sf

from app.core.errors import FormatError, InputError
from app.services.corpus_io import (
    N_KEYPOINTS,
    SAMPLE_RATE_HZ,
    AudioTrack,
    KeypointTrack,
    ManifestEntry,
    StrokeAnnotation,
    keypoint_columns,
    load_annotations,
    load_audio,
    load_keypoints,
    merge_strokes,
    read_manifest,
    save_annotations,
    save_audio,
    save_keypoints,
    strokes_for_speaker,
    write_manifest,
)


def _write_keypoints(path, frame_indices, value=1.0):
    rows = []
    for f in frame_indices:
        values = np.full(3 * N_KEYPOINTS, value + f)
        values[2::3] = 0.9
        rows.append([f, *values])
    pd.DataFrame(rows, columns=keypoint_columns()).to_csv(path, index=False)


def test_load_audio_resamples_to_16k(tmp_path):
    path = tmp_path / "a.wav"
    t = np.arange(48000) / 48000.0
    sf.write(str(path), 0.5 * np.sin(2 * np.pi * 220 * t), 48000, subtype="PCM_16")
    track = load_audio(path, "spk")
    assert track.sample_rate_hz == SAMPLE_RATE_HZ
    assert len(track.samples) == 16000
    assert track.speaker_id == "spk"
    assert track.duration_ms == 1000


def test_load_audio_averages_stereo(tmp_path):
    path = tmp_path / "stereo.wav"
    left = np.full(1600, 0.5)
    right = np.full(1600, -0.5)
    sf.write(str(path), np.stack([left, right], axis=1), SAMPLE_RATE_HZ, subtype="FLOAT")
    track = load_audio(path)
    assert np.allclose(track.samples, 0.0)


def test_load_audio_rejects_unreadable_and_empty(tmp_path):
    bogus = tmp_path / "bogus.wav"
    bogus.write_bytes(b"not a wav")
    with pytest.raises(InputError):
        load_audio(bogus)
    with pytest.raises(InputError):
        load_audio(tmp_path / "missing.wav")


def test_save_and_load_audio_within_pcm_precision(tmp_path):
    samples = np.sin(np.linspace(0, 20, 3200)) * 0.3
    save_audio(tmp_path / "x.wav", AudioTrack(samples, SAMPLE_RATE_HZ, "x"))
    back = load_audio(tmp_path / "x.wav")
    assert np.max(np.abs(back.samples - samples)) < 1e-4


def test_keypoint_gap_is_filled_by_previous_frame(tmp_path):
    path = tmp_path / "kp.csv"
    _write_keypoints(path, [0, 1, 3])
    track = load_keypoints(path, "spk")
    assert track.n_frames == 4
    assert track.gap_frames == (2,)
    assert np.array_equal(track.frames[2], track.frames[1])
    assert track.frames.shape == (4, N_KEYPOINTS, 3)


def test_keypoints_with_wrong_joint_count_is_format_error(tmp_path):
    path = tmp_path / "kp.csv"
    cols = ["frame"] + [f"v{i}" for i in range(3 * 100)]
    pd.DataFrame([[0] + [0.0] * 300], columns=cols).to_csv(path, index=False)
    with pytest.raises(FormatError):
        load_keypoints(path)


def test_keypoints_with_incomplete_frame_is_format_error(tmp_path):
    path = tmp_path / "kp.csv"
    _write_keypoints(path, [0, 1])
    df = pd.read_csv(path)
    df.iloc[1, 5] = np.nan
    df.to_csv(path, index=False)
    with pytest.raises(FormatError):
        load_keypoints(path)


def test_empty_keypoint_file_gives_empty_track(tmp_path):
    path = tmp_path / "kp.csv"
    pd.DataFrame(columns=keypoint_columns()).to_csv(path, index=False)
    track = load_keypoints(path)
    assert track.n_frames == 0


def test_save_keypoints_reloads(tmp_path):
    frames = np.random.default_rng(0).uniform(0, 100, (5, N_KEYPOINTS, 3))
    frames[..., 2] = 0.5
    save_keypoints(tmp_path / "kp.csv", KeypointTrack(frames, 29.97, "s"))
    back = load_keypoints(tmp_path / "kp.csv")
    assert np.allclose(back.frames, frames, atol=1e-3)


def test_stroke_with_end_before_start_is_rejected():
    with pytest.raises(FormatError):
        StrokeAnnotation("s", 500, 500)


def test_overlapping_strokes_merge():
    merged, n = merge_strokes([StrokeAnnotation("s", 0, 300), StrokeAnnotation("s", 200, 600),
                               StrokeAnnotation("t", 250, 400)])
    assert n == 1
    assert StrokeAnnotation("s", 0, 600) in merged
    assert StrokeAnnotation("t", 250, 400) in merged


def test_touching_strokes_stay_separate():
    merged, n = merge_strokes([StrokeAnnotation("s", 300, 600), StrokeAnnotation("s", 0, 300)])
    assert n == 0
    assert merged == [StrokeAnnotation("s", 0, 300), StrokeAnnotation("s", 300, 600)]


def test_annotations_are_sorted_and_merged(tmp_path):
    path = tmp_path / "ann.csv"
    save_annotations(path, [StrokeAnnotation("a", 900, 1200), StrokeAnnotation("a", 100, 400),
                            StrokeAnnotation("a", 350, 500), StrokeAnnotation("b", 100, 200)])
    strokes = load_annotations(path)
    assert [(s.start_ms, s.end_ms) for s in strokes_for_speaker(strokes, "a")] == [(100, 500), (900, 1200)]
    starts = [s.start_ms for s in strokes]
    assert starts == sorted(starts)


def test_annotations_missing_column_is_format_error(tmp_path):
    path = tmp_path / "ann.csv"
    pd.DataFrame({"speaker_id": ["a"], "start_ms": [0]}).to_csv(path, index=False)
    with pytest.raises(FormatError):
        load_annotations(path)


def test_manifest_paths_resolve_relative_to_manifest(tmp_path):
    entries = [ManifestEntry("d0", "s0", tmp_path / "audio" / "s0.wav", tmp_path / "kp" / "s0.csv",
                             tmp_path / "ann" / "d0.csv")]
    write_manifest(tmp_path / "manifest.csv", entries)
    raw = pd.read_csv(tmp_path / "manifest.csv")
    assert raw.loc[0, "audio_path"] == "audio/s0.wav"
    assert read_manifest(tmp_path / "manifest.csv") == entries


def test_missing_manifest_is_input_error(tmp_path):
    with pytest.raises(InputError):
        read_manifest(tmp_path / "nope.csv")
