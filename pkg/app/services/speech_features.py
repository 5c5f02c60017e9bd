"""
Speech features:
- 64-band log-Mel spectrograms of the speech window behind each pose window (model input)
- low-level descriptors for the feature study: MFCC[1..4], F0, log F0/harmonic ratio,
  per-track mean / max / skewness / kurtosis and voiced segment counts
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import librosa
import numpy as np
import scipy.fft
from scipy.stats import kurtosis, skew

from app.core.errors import ConfigError, InputError
from app.services.corpus_io import FRAME_RATE_FPS, SAMPLE_RATE_HZ, AudioTrack

logger = logging.getLogger(__name__)

N_MELS = 64
FRAME_MS = 25
HOP_MS = 10
N_FFT = 1024
MEL_FMIN_HZ = 125.0
MEL_FMAX_HZ = 7500.0
LOG_FLOOR = 1e-10
FRAMES_PER_MS = 0.096

BASE_WINDOW_MS = 500
ALLOWED_BUFFERS_MS = (0, 250, 500)

F0_FRAME_MS = 40
F0_MIN_HZ = 50.0
F0_MAX_HZ = 500.0
VOICING_THRESHOLD = 0.45
SILENCE_RMS = 1e-4
MIN_VOICED_RUN = 3

N_MFCC = 4
HARMONIC_FFT = 8192
HARMONIC_TOLERANCE = 0.10


@dataclass(frozen=True)
class SpeechWindowConfig:
    base_duration_ms: int = BASE_WINDOW_MS
    buffer_ms: int = 0

    def __post_init__(self):
        if self.base_duration_ms != BASE_WINDOW_MS:
            raise ConfigError(f"speech base window must be {BASE_WINDOW_MS} ms")
        if self.buffer_ms not in ALLOWED_BUFFERS_MS:
            raise ConfigError(f"speech buffer_ms must be one of {ALLOWED_BUFFERS_MS}, got {self.buffer_ms}")

    @property
    def total_ms(self) -> int:
        return self.base_duration_ms + self.buffer_ms

    @property
    def n_samples(self) -> int:
        return self.total_ms * SAMPLE_RATE_HZ // 1000

    @property
    def n_frames(self) -> int:
        return mel_frame_count(self.total_ms)


@dataclass(frozen=True)
class MelSpectrogram:
    """values: (n_mels, n_frames) natural-log Mel magnitudes."""
    values: np.ndarray
    frame_ms: int = FRAME_MS
    hop_ms: int = HOP_MS

    @property
    def n_mels(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class F0Track:
    """Per 10 ms frame: f0_hz (NaN when unvoiced) and voicing confidence in [0, 1]."""
    f0_hz: np.ndarray
    confidence: np.ndarray
    hop_ms: int = HOP_MS

    @property
    def voiced(self) -> np.ndarray:
        return np.isfinite(self.f0_hz)

    def __len__(self) -> int:
        return int(self.f0_hz.shape[0])


class TrackStats(NamedTuple):
    amean: float
    max: float
    skewness: float
    kurtosis: float


def mel_frame_count(duration_ms: float) -> int:
    return int(round(FRAMES_PER_MS * duration_ms))


_MEL_BASIS: Optional[np.ndarray] = None


def mel_filterbank() -> np.ndarray:
    """(64, N_FFT // 2 + 1) triangular HTK-scale filters over 125-7500 Hz."""
    global _MEL_BASIS
    if _MEL_BASIS is None:
        _MEL_BASIS = librosa.filters.mel(sr=SAMPLE_RATE_HZ, n_fft=N_FFT, n_mels=N_MELS,
                                         fmin=MEL_FMIN_HZ, fmax=MEL_FMAX_HZ, htk=True, norm=None)
    return _MEL_BASIS


def _frames(samples: np.ndarray, frame_length: int, hop_length: int) -> np.ndarray:
    """(frame_length, n_frames) view; input shorter than one frame is zero-padded to one frame."""
    x = np.ascontiguousarray(samples, dtype=np.float64)
    if x.shape[0] < frame_length:
        x = np.pad(x, (0, frame_length - x.shape[0]))
    return librosa.util.frame(x, frame_length=frame_length, hop_length=hop_length)


def _magnitude_frames(samples: np.ndarray, frame_length: int, hop_length: int, n_fft: int) -> np.ndarray:
    """(n_fft // 2 + 1, n_frames) |STFT| of periodic-Hann frames starting every hop_length samples."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < frame_length:
        x = np.pad(x, (0, frame_length - x.shape[0]))
    # librosa centers the short window inside n_fft; the edge padding keeps frame i at sample i * hop
    edge = (n_fft - frame_length) // 2
    return np.abs(librosa.stft(np.pad(x, edge), n_fft=n_fft, hop_length=hop_length, win_length=frame_length,
                               window="hann", center=False))


def extract_window_audio(track: AudioTrack, start_frame: int, config: SpeechWindowConfig,
                         fps: float = FRAME_RATE_FPS) -> np.ndarray:
    """Samples of [window start, window start + 500 ms + buffer); outside the track is zeros."""
    start = int(round(start_frame / fps * track.sample_rate_hz))
    n = config.n_samples
    out = np.zeros(n, dtype=np.float64)
    lo, hi = max(start, 0), min(start + n, len(track.samples))
    if hi > lo:
        out[lo - start:hi - start] = track.samples[lo:hi]
    return out


def mel_spectrogram(samples: np.ndarray, duration_ms: Optional[float] = None) -> MelSpectrogram:
    """
    25 ms periodic-Hann frames at a 10 ms hop, |FFT| through 64 Mel filters, natural log
    floored at 1e-10. The frame axis is trimmed or padded with floor frames to
    round(0.096 * duration_ms) so 500/750/1000 ms give 48/72/96 frames.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise InputError("cannot compute a Mel spectrogram of empty audio")
    if duration_ms is None:
        duration_ms = 1000.0 * samples.size / SAMPLE_RATE_HZ

    frame_len = SAMPLE_RATE_HZ * FRAME_MS // 1000
    hop = SAMPLE_RATE_HZ * HOP_MS // 1000
    magnitude = _magnitude_frames(samples, frame_len, hop, N_FFT)
    log_mel = np.log(np.maximum(mel_filterbank() @ magnitude, LOG_FLOOR))

    target = mel_frame_count(duration_ms)
    if log_mel.shape[1] >= target:
        log_mel = log_mel[:, :target]
    else:
        pad = np.full((N_MELS, target - log_mel.shape[1]), np.log(LOG_FLOOR))
        log_mel = np.concatenate([log_mel, pad], axis=1)
    return MelSpectrogram(values=log_mel)


def estimate_f0(samples: np.ndarray, sample_rate_hz: int = SAMPLE_RATE_HZ) -> F0Track:
    """
    Normalized autocorrelation over 40 ms frames at a 10 ms hop, lags for 50-500 Hz.
    The smallest-lag local maximum reaching 90% of the strongest one is the period;
    a frame is voiced when that peak is >= 0.45 and the frame is not silent.
    """
    frame_len = sample_rate_hz * F0_FRAME_MS // 1000
    hop = sample_rate_hz * HOP_MS // 1000
    min_lag = int(np.floor(sample_rate_hz / F0_MAX_HZ))
    max_lag = int(np.ceil(sample_rate_hz / F0_MIN_HZ))

    frames = _frames(np.asarray(samples, dtype=np.float64), frame_len, hop).T
    frames = frames - frames.mean(axis=1, keepdims=True)
    n_fft = 1 << int(np.ceil(np.log2(2 * frame_len)))
    spectrum = np.fft.rfft(frames, n=n_fft, axis=1)
    acf = np.fft.irfft(np.abs(spectrum) ** 2, n=n_fft, axis=1)[:, :max_lag + 2]

    energy = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(max_lag + 2)
    head = energy[:, frame_len - lags]
    tail = energy[:, [frame_len]] - energy[:, lags]
    nacf = acf / np.sqrt(np.maximum(head * tail, 1e-20))

    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    f0 = np.full(frames.shape[0], np.nan)
    conf = np.zeros(frames.shape[0])
    for i, r in enumerate(nacf):
        if rms[i] < SILENCE_RMS:
            continue
        cand = np.arange(max(min_lag, 1), max_lag + 1)
        peaks = cand[(r[cand] > r[cand - 1]) & (r[cand] >= r[cand + 1])]
        if peaks.size == 0:
            continue
        best = float(r[peaks].max())
        conf[i] = float(np.clip(best, 0.0, 1.0))
        if best < VOICING_THRESHOLD:
            continue
        lag = int(peaks[r[peaks] >= 0.9 * best][0])
        a, b, c = r[lag - 1], r[lag], r[lag + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        freq = sample_rate_hz / (lag + shift)
        if F0_MIN_HZ <= freq <= F0_MAX_HZ:
            f0[i] = freq
    return F0Track(f0_hz=f0, confidence=conf)


def mfcc(mel: MelSpectrogram, n_coeffs: int = N_MFCC) -> np.ndarray:
    """(n_coeffs, n_frames): orthonormal DCT-II of each log-Mel frame, coefficient 0 dropped."""
    return scipy.fft.dct(mel.values, type=2, norm="ortho", axis=0)[1:n_coeffs + 1]


def log_rel_f0_harmonics(samples: np.ndarray, f0_track: F0Track,
                         sample_rate_hz: int = SAMPLE_RATE_HZ) -> Optional[float]:
    """
    Mean over voiced frames of mean_k∈{2,3} log(A1 / Ak), where Ak is the peak
    magnitude within ±10% of k·F0. None without voiced frames.
    """
    frame_len = sample_rate_hz * F0_FRAME_MS // 1000
    hop = sample_rate_hz * HOP_MS // 1000
    spectra = _magnitude_frames(samples, frame_len, hop, HARMONIC_FFT)
    freqs = librosa.fft_frequencies(sr=sample_rate_hz, n_fft=HARMONIC_FFT)

    values = []
    for i in np.flatnonzero(f0_track.voiced):
        if i >= spectra.shape[1]:
            break
        mag = spectra[:, i]
        f0 = f0_track.f0_hz[i]
        amps = []
        for k in (1, 2, 3):
            band = (freqs >= (1 - HARMONIC_TOLERANCE) * k * f0) & (freqs <= (1 + HARMONIC_TOLERANCE) * k * f0)
            amps.append(float(mag[band].max()) if band.any() else 0.0)
        if min(amps) <= 0.0:
            continue
        values.append(0.5 * (np.log(amps[0] / amps[1]) + np.log(amps[0] / amps[2])))
    return float(np.mean(values)) if values else None


def window_stats(track: Sequence[float]) -> TrackStats:
    """Mean, max, biased skewness m3/m2^1.5 and excess kurtosis m4/m2^2 - 3 (0 for constant tracks)."""
    x = np.asarray(track, dtype=np.float64)
    if x.size == 0:
        raise InputError("window_stats of an empty track")
    if np.ptp(x) == 0:
        return TrackStats(float(x.mean()), float(x.max()), 0.0, 0.0)
    return TrackStats(float(x.mean()), float(x.max()),
                      float(skew(x, bias=True)), float(kurtosis(x, fisher=True, bias=True)))


def voiced_segment_count(f0_track: F0Track | Sequence[bool], min_run: int = MIN_VOICED_RUN) -> int:
    """Number of maximal voiced runs of at least min_run frames."""
    voiced = f0_track.voiced if isinstance(f0_track, F0Track) else np.asarray(f0_track, dtype=bool)
    count, run = 0, 0
    for v in voiced:
        if v:
            run += 1
        else:
            count += run >= min_run
            run = 0
    count += run >= min_run
    return int(count)


STAT_NAMES = ("amean", "max", "skew", "kurt")
FEATURE_NAMES: List[str] = (
    [f"mfcc{k}_{s}" for k in range(1, N_MFCC + 1) for s in STAT_NAMES]
    + [f"f0_{s}" for s in STAT_NAMES]
    + ["logrelf0_h1a3_amean"]
)


def low_level_features(samples: np.ndarray) -> Dict[str, Optional[float]]:
    """Feature-study descriptors of one analysis window; F0 features are None without voiced frames."""
    mel = mel_spectrogram(samples)
    coeffs = mfcc(mel)
    f0_track = estimate_f0(samples)

    out: Dict[str, Optional[float]] = {}
    for k in range(N_MFCC):
        for name, value in zip(STAT_NAMES, window_stats(coeffs[k])):
            out[f"mfcc{k + 1}_{name}"] = value
    voiced_f0 = f0_track.f0_hz[f0_track.voiced]
    if voiced_f0.size:
        for name, value in zip(STAT_NAMES, window_stats(voiced_f0)):
            out[f"f0_{name}"] = value
    else:
        out.update({f"f0_{name}": None for name in STAT_NAMES})
    out["logrelf0_h1a3_amean"] = log_rel_f0_harmonics(samples, f0_track)
    out["voiced_segments"] = voiced_segment_count(f0_track)
    return out
