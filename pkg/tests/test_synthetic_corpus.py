from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from app.core.errors import ConfigError
from app.services.analysis import welch_t
from app.services.corpus_io import N_KEYPOINTS, SAMPLE_RATE_HZ, read_manifest
from app.services.speech_features import estimate_f0
from app.services.synthetic_corpus import (
    NO_CUE,
    SyntheticCorpusSpec,
    generate_synthetic_dialogue,
    write_synthetic_corpus,
)

from conftest import tiny_spec


def test_dialogue_shapes_and_annotations():
    spec = tiny_spec()
    audio, keypoints, strokes = generate_synthetic_dialogue(spec, 0, 1)
    assert audio.sample_rate_hz == SAMPLE_RATE_HZ
    assert len(audio.samples) == int(spec.dialogue_duration_s * SAMPLE_RATE_HZ)
    assert keypoints.frames.shape == (int(round(spec.dialogue_duration_s * spec.frame_rate_fps)), N_KEYPOINTS, 3)
    assert len(strokes) == spec.n_strokes
    assert all(s.speaker_id == audio.speaker_id == keypoints.speaker_id for s in strokes)
    assert np.max(np.abs(audio.samples)) <= 0.95 + 1e-12
    ends = [s.end_ms for s in strokes]
    starts = [s.start_ms for s in strokes]
    assert all(e <= s for e, s in zip(ends, starts[1:]))


def test_generation_is_deterministic_per_seed():
    spec = tiny_spec()
    a1, k1, s1 = generate_synthetic_dialogue(spec, 2, 0)
    a2, k2, s2 = generate_synthetic_dialogue(spec, 2, 0)
    assert np.array_equal(a1.samples, a2.samples)
    assert np.array_equal(k1.frames, k2.frames)
    assert s1 == s2
    a3, _, _ = generate_synthetic_dialogue(tiny_spec(seed=4), 2, 0)
    assert not np.array_equal(a1.samples, a3.samples)


def test_stroke_frames_move_the_hands_more_than_rest():
    spec = tiny_spec(distractors_per_minute=0.0)
    _, keypoints, strokes = generate_synthetic_dialogue(spec, 0, 0)
    speed = np.linalg.norm(np.diff(keypoints.frames[:, 91:133, :2], axis=0), axis=-1).mean(axis=1)
    in_stroke = np.zeros(len(speed), dtype=bool)
    for s in strokes:
        lo = int(np.ceil(s.start_ms / 1000 * spec.frame_rate_fps))
        hi = int(np.floor(s.end_ms / 1000 * spec.frame_rate_fps))
        in_stroke[lo:hi] = True
    assert speed[in_stroke].mean() > 3 * speed[~in_stroke].mean()


def test_cue_raises_pitch_after_the_lag():
    spec = tiny_spec(distractors_per_minute=0.0, syllables_per_second=0.0, cue_snr_db=6.0)
    audio, _, strokes = generate_synthetic_dialogue(spec, 1, 0)
    s = max(strokes, key=lambda x: x.duration_ms)
    assert s.duration_ms > 250
    lo = int((s.start_ms + spec.speech_cue_lag_ms + 50) * SAMPLE_RATE_HZ / 1000)
    hi = int((s.end_ms + spec.speech_cue_lag_ms - 50) * SAMPLE_RATE_HZ / 1000)
    f0 = estimate_f0(audio.samples[lo:hi])
    assert f0.voiced.mean() > 0.5
    assert 140.0 <= np.nanmedian(f0.f0_hz) <= 235.0


def test_no_cue_corpus_has_no_tone():
    spec = tiny_spec(cue_snr_db=NO_CUE, syllables_per_second=0.0, distractors_per_minute=0.0)
    audio, _, _ = generate_synthetic_dialogue(spec, 0, 0)
    assert estimate_f0(audio.samples).voiced.mean() < 0.1


def test_too_many_events_is_config_error():
    with pytest.raises(ConfigError):
        SyntheticCorpusSpec(dialogue_duration_s=5.0, strokes_per_minute=120.0)
    with pytest.raises(ConfigError):
        SyntheticCorpusSpec(n_dialogues=0)


def test_corpus_on_disk_has_two_tracks_per_dialogue(tmp_path):
    spec = tiny_spec(n_dialogues=3, dialogue_duration_s=6.0)
    manifest = write_synthetic_corpus(spec, tmp_path / "c")
    entries = read_manifest(manifest)
    assert len(entries) == 6
    assert len({e.dialogue_id for e in entries}) == 3
    assert all(e.audio_path.exists() and e.keypoint_path.exists() for e in entries)


def test_writing_twice_needs_force_and_is_byte_identical(tmp_path):
    spec = tiny_spec(n_dialogues=2, dialogue_duration_s=6.0)
    out = tmp_path / "c"
    write_synthetic_corpus(spec, out)
    first = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    with pytest.raises(ConfigError):
        write_synthetic_corpus(spec, out)
    write_synthetic_corpus(spec, out, force=True)
    second = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert first == second
    assert pd.read_csv(out / "manifest.csv").shape[0] == 4


def _frame_energy_split(audio, strokes, lag_ms, frame_ms=100):
    """Mean-square energy of consecutive frames, split by whether the frame centre lies in a lagged stroke."""
    n = int(SAMPLE_RATE_HZ * frame_ms / 1000)
    n_frames = len(audio.samples) // n
    energy = (audio.samples[:n_frames * n].reshape(n_frames, n) ** 2).mean(axis=1)
    centres = (np.arange(n_frames) + 0.5) * frame_ms
    inside = np.zeros(n_frames, dtype=bool)
    for s in strokes:
        inside |= (centres >= s.start_ms + lag_ms) & (centres < s.end_ms + lag_ms)
    return energy[inside], energy[~inside]


def test_audible_cue_raises_energy_inside_lagged_strokes():
    spec = tiny_spec(dialogue_duration_s=60.0, distractors_per_minute=0.0, cue_snr_db=10.0)
    audio, _, strokes = generate_synthetic_dialogue(spec, 0, 0)
    inside, outside = _frame_energy_split(audio, strokes, spec.speech_cue_lag_ms)
    assert inside.mean() > 3 * outside.mean()
    res = welch_t(inside, outside)
    assert res.statistic > 0
    assert res.p_value < 1e-3


def test_without_cue_stroke_frames_have_ordinary_energy():
    spec = tiny_spec(dialogue_duration_s=60.0, distractors_per_minute=0.0, syllables_per_second=0.0,
                     cue_snr_db=NO_CUE)
    audio, _, strokes = generate_synthetic_dialogue(spec, 0, 0)
    inside, outside = _frame_energy_split(audio, strokes, spec.speech_cue_lag_ms)
    assert len(inside) > 30
    assert welch_t(inside, outside).p_value > 0.01
