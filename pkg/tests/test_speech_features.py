from __future__ import annotations

import numpy as np
import pytest

from app.core.errors import ConfigError, InputError
from app.services.corpus_io import SAMPLE_RATE_HZ, AudioTrack
from app.services.speech_features import (
    FEATURE_NAMES,
    LOG_FLOOR,
    N_FFT,
    N_MELS,
    SpeechWindowConfig,
    estimate_f0,
    extract_window_audio,
    low_level_features,
    mel_filterbank,
    mel_spectrogram,
    mfcc,
    voiced_segment_count,
    window_stats,
)


def _tone(f_hz, seconds=1.0, harmonics=(1.0,)):
    t = np.arange(int(seconds * SAMPLE_RATE_HZ)) / SAMPLE_RATE_HZ
    return sum(0.5 * a * np.sin(2 * np.pi * (k + 1) * f_hz * t) for k, a in enumerate(harmonics))


@pytest.mark.parametrize("buffer_ms, n_frames", [(0, 48), (250, 72), (500, 96)])
def test_mel_shape_follows_window_duration(buffer_ms, n_frames):
    cfg = SpeechWindowConfig(buffer_ms=buffer_ms)
    assert cfg.n_frames == n_frames
    mel = mel_spectrogram(np.zeros(cfg.n_samples), cfg.total_ms)
    assert mel.values.shape == (N_MELS, n_frames)
    assert np.allclose(mel.values, np.log(LOG_FLOOR))


def test_mel_energy_peaks_in_the_band_of_the_tone():
    mel = mel_spectrogram(_tone(1000.0, 0.5), 500)
    fft_bin = int(round(1000.0 * N_FFT / SAMPLE_RATE_HZ))
    expected = int(np.argmax(mel_filterbank()[:, fft_bin]))
    assert abs(int(np.argmax(mel.values.mean(axis=1))) - expected) <= 1


def test_mel_frames_start_every_hop(rng):
    samples = rng.normal(size=8000)
    mel = mel_spectrogram(samples).values
    window = np.hanning(401)[:-1]
    for j in (0, 1, 23, 47):
        frame = samples[160 * j:160 * j + 400] * window
        expected = np.log(np.maximum(mel_filterbank() @ np.abs(np.fft.rfft(frame, n=N_FFT)), LOG_FLOOR))
        assert np.allclose(mel[:, j], expected, atol=1e-8)


def test_empty_audio_is_input_error():
    with pytest.raises(InputError):
        mel_spectrogram(np.zeros(0))


def test_unsupported_buffer_is_config_error():
    with pytest.raises(ConfigError):
        SpeechWindowConfig(buffer_ms=100)


def test_window_audio_is_zero_padded_past_track_end():
    samples = np.arange(SAMPLE_RATE_HZ, dtype=np.float64)
    track = AudioTrack(samples, SAMPLE_RATE_HZ, "s")
    cfg = SpeechWindowConfig(buffer_ms=500)
    out = extract_window_audio(track, 15, cfg, fps=30.0)
    assert out.shape == (16000,)
    assert out[0] == 8000.0
    assert np.all(out[8000:] == 0.0)


@pytest.mark.parametrize("f_hz", [110.0, 220.0, 330.0])
def test_f0_of_pure_tone(f_hz):
    track = estimate_f0(_tone(f_hz))
    assert track.voiced.mean() > 0.9
    assert np.nanmedian(track.f0_hz) == pytest.approx(f_hz, abs=2.0)
    assert len(track) == pytest.approx(100, abs=3)


def test_silence_is_unvoiced():
    track = estimate_f0(np.zeros(8000))
    assert not track.voiced.any()
    assert np.all(track.confidence == 0.0)


def test_window_stats_against_moments():
    x = np.array([1.0, 2.0, 3.0, 4.0, 10.0])
    m = x.mean()
    m2, m3, m4 = (((x - m) ** k).mean() for k in (2, 3, 4))
    stats = window_stats(x)
    assert stats.amean == pytest.approx(4.0)
    assert stats.max == 10.0
    assert stats.skewness == pytest.approx(m3 / m2 ** 1.5)
    assert stats.kurtosis == pytest.approx(m4 / m2 ** 2 - 3.0)
    assert window_stats([2.0, 2.0, 2.0]) == (2.0, 2.0, 0.0, 0.0)
    with pytest.raises(InputError):
        window_stats([])


def test_voiced_segment_count_needs_three_frame_runs():
    voiced = [True, True, True, False, True, True, False, True, True, True, True]
    assert voiced_segment_count(voiced) == 2
    assert voiced_segment_count(voiced, min_run=2) == 3
    assert voiced_segment_count([]) == 0


def test_mfcc_is_orthonormal_dct_without_c0(rng):
    mel = mel_spectrogram(rng.normal(0, 0.1, 8000), 500)
    coeffs = mfcc(mel)
    assert coeffs.shape == (4, 48)
    n = np.arange(N_MELS)
    for k in range(1, 5):
        basis = np.sqrt(2.0 / N_MELS) * np.cos(np.pi * k * (2 * n + 1) / (2 * N_MELS))
        assert np.allclose(coeffs[k - 1], basis @ mel.values)


def test_low_level_features_of_harmonic_tone():
    feats = low_level_features(_tone(200.0, 1.0, harmonics=(1.0, 0.5, 0.25)))
    assert set(feats) == set(FEATURE_NAMES) | {"voiced_segments"}
    assert feats["f0_amean"] == pytest.approx(200.0, abs=3.0)
    assert feats["logrelf0_h1a3_amean"] == pytest.approx(1.5 * np.log(2.0), abs=0.1)
    assert feats["voiced_segments"] == 1


def test_low_level_features_of_silence_have_no_f0():
    feats = low_level_features(np.zeros(16000))
    assert feats["f0_amean"] is None
    assert feats["logrelf0_h1a3_amean"] is None
    assert feats["voiced_segments"] == 0
    assert feats["mfcc1_amean"] == pytest.approx(0.0, abs=1e-9)
