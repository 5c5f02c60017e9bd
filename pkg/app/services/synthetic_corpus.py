"""
Deterministic synthetic dialogues with a known gesture-speech coupling.

Each speaker track carries:
- keypoints: a 133-joint rest pose with smooth noise; every stroke adds a hand
  movement burst, and unannotated distractor movements add similar bursts
  that have no acoustic counterpart
- audio: band-limited babble with voiced syllables at the speaker's normal pitch;
  every stroke adds, lagged by speech_cue_lag_ms, a harmonic tone complex with
  raised F0 and a dominant first harmonic at cue_snr_db over the babble
- annotations: the stroke intervals

Random draws come from one generator seeded with (seed, dialogue_index,
speaker_index) and are consumed in a fixed order: speaker profile, event
layout, pose noise, pose bursts, babble noise, syllables, cue phases.
"""
from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import butter, sosfilt

from app.core.errors import ConfigError
from app.services.corpus_io import (
    FRAME_RATE_FPS,
    N_KEYPOINTS,
    SAMPLE_RATE_HZ,
    AudioTrack,
    KeypointTrack,
    ManifestEntry,
    StrokeAnnotation,
    save_annotations,
    save_audio,
    save_keypoints,
    write_manifest,
)

logger = logging.getLogger(__name__)

NO_CUE = float("-inf")

# COCO-WholeBody layout
LEFT_HAND = list(range(91, 112))
RIGHT_HAND = list(range(112, 133))
LEFT_ARM = {"elbow": 7, "wrist": 9}
RIGHT_ARM = {"elbow": 8, "wrist": 10}

MIN_EVENT_MS = 120
EVENT_MARGIN_MS = 100
BABBLE_RMS = 0.05


@dataclass
class SyntheticCorpusSpec:
    n_dialogues: int = 20
    dialogue_duration_s: float = 60.0
    strokes_per_minute: float = 10.0
    # log-normal stroke durations: mean 580 ms, median ~420 ms
    stroke_duration_ms: Tuple[float, float] = (580.0, 552.0)
    speech_cue_lag_ms: int = 300
    cue_snr_db: float = 0.0
    pose_burst_amplitude: float = 40.0
    distractors_per_minute: float = 4.0
    speakers_per_dialogue: int = 2
    frame_rate_fps: float = FRAME_RATE_FPS
    syllables_per_second: float = 1.5
    seed: int = 7

    def __post_init__(self):
        self.stroke_duration_ms = tuple(float(v) for v in self.stroke_duration_ms)
        if self.n_dialogues <= 0:
            raise ConfigError("synthetic.n_dialogues must be positive")
        if self.dialogue_duration_s <= 0:
            raise ConfigError("synthetic.dialogue_duration_s must be positive")
        if self.strokes_per_minute <= 0:
            raise ConfigError("synthetic.strokes_per_minute must be positive")
        if len(self.stroke_duration_ms) != 2 or min(self.stroke_duration_ms) <= 0:
            raise ConfigError("synthetic.stroke_duration_ms must be a positive (mean, sd) pair")
        if self.pose_burst_amplitude <= 0:
            raise ConfigError("synthetic.pose_burst_amplitude must be positive")
        if self.distractors_per_minute < 0 or self.syllables_per_second < 0:
            raise ConfigError("synthetic event rates must be non-negative")
        if self.speakers_per_dialogue <= 0 or self.frame_rate_fps <= 0:
            raise ConfigError("synthetic.speakers_per_dialogue and frame_rate_fps must be positive")
        if math.isnan(self.cue_snr_db) or self.cue_snr_db == float("inf"):
            raise ConfigError("synthetic.cue_snr_db must be finite or -inf (no cue)")

        n_events = self.n_strokes + self.n_distractors
        slot_ms = self.dialogue_duration_s * 1000.0 / n_events
        if slot_ms < MIN_EVENT_MS + 2 * EVENT_MARGIN_MS + abs(self.speech_cue_lag_ms):
            raise ConfigError(f"{n_events} events do not fit into {self.dialogue_duration_s} s")

    @property
    def n_strokes(self) -> int:
        return max(1, int(round(self.strokes_per_minute * self.dialogue_duration_s / 60.0)))

    @property
    def n_distractors(self) -> int:
        return int(round(self.distractors_per_minute * self.dialogue_duration_s / 60.0))

    @property
    def has_cue(self) -> bool:
        return self.cue_snr_db != NO_CUE


@dataclass(frozen=True)
class _Event:
    start_ms: int
    end_ms: int
    is_stroke: bool
    amplitude: float
    hands: str  # 'left', 'right' or 'both'
    angle: float


def _speaker_id(dialogue_index: int, speaker_index: int) -> str:
    return f"d{dialogue_index:03d}_s{speaker_index}"


def dialogue_id(dialogue_index: int) -> str:
    return f"dialogue_{dialogue_index:03d}"


def _lognormal_params(mean: float, sd: float) -> Tuple[float, float]:
    sigma2 = math.log(1.0 + (sd / mean) ** 2)
    return math.log(mean) - sigma2 / 2.0, math.sqrt(sigma2)


def _layout_events(spec: SyntheticCorpusSpec, rng: np.random.Generator) -> List[_Event]:
    """One event per equal-length slot, so events never overlap."""
    n_events = spec.n_strokes + spec.n_distractors
    duration_ms = spec.dialogue_duration_s * 1000.0
    slot_ms = duration_ms / n_events
    is_stroke = np.zeros(n_events, dtype=bool)
    is_stroke[rng.permutation(n_events)[:spec.n_strokes]] = True
    mu, sigma = _lognormal_params(*spec.stroke_duration_ms)

    lead = EVENT_MARGIN_MS + max(-spec.speech_cue_lag_ms, 0)
    tail = EVENT_MARGIN_MS + max(spec.speech_cue_lag_ms, 0)
    events = []
    for i in range(n_events):
        slot_start = i * slot_ms
        max_dur = max(MIN_EVENT_MS, slot_ms - lead - tail)
        dur = float(np.clip(rng.lognormal(mu, sigma), MIN_EVENT_MS, max_dur))
        room = slot_ms - lead - tail - dur
        start = slot_start + lead + (rng.uniform(0.0, room) if room > 0 else 0.0)
        amp_range = (0.8, 1.2) if is_stroke[i] else (0.6, 1.0)
        events.append(_Event(
            start_ms=int(round(start)),
            end_ms=int(round(start + dur)),
            is_stroke=bool(is_stroke[i]),
            amplitude=spec.pose_burst_amplitude * rng.uniform(*amp_range),
            hands=str(rng.choice(["left", "right", "both"])),
            angle=float(rng.uniform(0.0, 2.0 * np.pi)),
        ))
    return events


def rest_pose(rng: np.random.Generator) -> np.ndarray:
    """Frontal upper-body rest pose in pixel coordinates, (133, 2)."""
    pose = np.zeros((N_KEYPOINTS, 2))
    cx, cy = 640.0 + rng.uniform(-40, 40), 300.0 + rng.uniform(-20, 20)
    s = rng.uniform(0.9, 1.1)

    def at(dx, dy):
        return np.array([cx + s * dx, cy + s * dy])

    body = {0: (0, -120), 1: (-18, -135), 2: (18, -135), 3: (-40, -125), 4: (40, -125),
            5: (-80, 0), 6: (80, 0), 7: (-110, 120), 8: (110, 120), 9: (-70, 210), 10: (70, 210),
            11: (-55, 260), 12: (55, 260), 13: (-60, 420), 14: (60, 420), 15: (-60, 560), 16: (60, 560)}
    for j, (dx, dy) in body.items():
        pose[j] = at(dx, dy)
    for j in range(17, 23):
        pose[j] = at(-60 + 24 * (j - 17), 600)
    angles = np.linspace(0, 2 * np.pi, 68, endpoint=False)
    pose[23:91] = np.stack([cx + s * 30 * np.cos(angles), cy + s * (-120 + 38 * np.sin(angles))], axis=1)

    for hand, wrist, side in ((LEFT_HAND, body[9], -1), (RIGHT_HAND, body[10], 1)):
        pose[hand[0]] = at(*wrist)
        for finger in range(5):
            spread = (finger - 2) * 9
            for k in range(4):
                pose[hand[1 + 4 * finger + k]] = at(wrist[0] + side * (6 + spread * 0.3) + spread,
                                                    wrist[1] + 14 + 9 * k)
    return pose


def _burst_offsets(n: int, amplitude: float, angle: float) -> np.ndarray:
    """Smooth out-and-back hand path with a superimposed beat, (n, 2)."""
    u = np.linspace(0.0, 1.0, n)
    main = np.sin(np.pi * u)
    beat = 0.3 * np.sin(3 * np.pi * u)
    direction = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-direction[1], direction[0]])
    return amplitude * (main[:, None] * direction + beat[:, None] * normal)


def _keypoints(spec: SyntheticCorpusSpec, events: List[_Event], n_frames: int,
               rng: np.random.Generator) -> np.ndarray:
    fps = spec.frame_rate_fps
    base = rest_pose(rng)
    jitter = gaussian_filter1d(rng.normal(0.0, 1.0, (n_frames, N_KEYPOINTS, 2)), sigma=4, axis=0)
    jitter *= 1.5 / max(float(jitter.std()), 1e-9)
    sway = gaussian_filter1d(rng.normal(0.0, 1.0, (n_frames, 1, 2)), sigma=30, axis=0)
    sway *= 3.0 / max(float(sway.std()), 1e-9)
    xy = base[None] + jitter + sway

    for ev in events:
        f0 = int(math.ceil(ev.start_ms / 1000.0 * fps))
        f1 = min(int(math.floor(ev.end_ms / 1000.0 * fps)), n_frames - 1)
        if f1 <= f0:
            continue
        offsets = _burst_offsets(f1 - f0 + 1, ev.amplitude, ev.angle)
        sides = {"left": [(LEFT_HAND, LEFT_ARM)], "right": [(RIGHT_HAND, RIGHT_ARM)],
                 "both": [(LEFT_HAND, LEFT_ARM), (RIGHT_HAND, RIGHT_ARM)]}[ev.hands]
        for hand, arm in sides:
            xy[f0:f1 + 1, hand] += offsets[:, None, :]
            xy[f0:f1 + 1, arm["wrist"]] += offsets
            xy[f0:f1 + 1, arm["elbow"]] += 0.4 * offsets

    conf = np.clip(0.9 + gaussian_filter1d(rng.normal(0.0, 0.05, (n_frames, N_KEYPOINTS)), 3, axis=0), 0.0, 1.0)
    return np.concatenate([xy, conf[..., None]], axis=2)


def _harmonic_tone(n: int, f0_hz: float, amplitudes: List[float], sr: int, phase: float) -> np.ndarray:
    t = np.arange(n) / sr
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * 5.0 * t)
    phase_track = 2 * np.pi * np.cumsum(f0_hz * vibrato) / sr + phase
    out = np.zeros(n)
    for k, a in enumerate(amplitudes, start=1):
        if k * f0_hz < sr / 2:
            out += a * np.sin(k * phase_track)
    return out


def _ramped(x: np.ndarray, sr: int, ramp_ms: float = 10.0) -> np.ndarray:
    n_ramp = min(len(x) // 2, int(sr * ramp_ms / 1000.0))
    if n_ramp > 0:
        ramp = np.sin(np.linspace(0.0, np.pi / 2, n_ramp)) ** 2
        x[:n_ramp] *= ramp
        x[-n_ramp:] *= ramp[::-1]
    return x


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x ** 2))) if x.size else 0.0


def _audio(spec: SyntheticCorpusSpec, events: List[_Event], n_samples: int, base_f0: float,
           rng: np.random.Generator) -> np.ndarray:
    sr = SAMPLE_RATE_HZ
    sos = butter(4, [150.0, 3800.0], btype="bandpass", fs=sr, output="sos")
    noise = sosfilt(sos, rng.normal(0.0, 1.0, n_samples))
    envelope = 0.5 + np.abs(gaussian_filter1d(rng.normal(0.0, 1.0, n_samples), sigma=sr * 0.04))
    babble = noise * envelope
    babble *= BABBLE_RMS / max(_rms(babble), 1e-12)

    # voiced syllables at the speaker's own pitch, flat first harmonics
    n_syllables = int(round(spec.syllables_per_second * n_samples / sr))
    syllable_amps = [1.0, 1.0, 1.0] + [1.0 / k for k in range(4, 13)]
    for _ in range(n_syllables):
        dur = int(sr * rng.uniform(0.12, 0.28))
        start = int(rng.integers(0, max(1, n_samples - dur)))
        f0 = base_f0 * rng.uniform(0.9, 1.1)
        tone = _ramped(_harmonic_tone(dur, f0, syllable_amps, sr, rng.uniform(0, 2 * np.pi)), sr, 20.0)
        tone *= 1.5 * BABBLE_RMS / max(_rms(tone), 1e-12)
        babble[start:start + dur] += tone[:n_samples - start]

    if not spec.has_cue:
        return babble

    # gesture cue: raised F0, dominant fundamental
    level = _rms(babble) * 10.0 ** (spec.cue_snr_db / 20.0)
    cue_amps = [0.5 ** k for k in range(6)]
    for ev in events:
        phase = rng.uniform(0, 2 * np.pi)
        if not ev.is_stroke:
            continue
        start = int(round((ev.start_ms + spec.speech_cue_lag_ms) * sr / 1000.0))
        dur = int(round((ev.end_ms - ev.start_ms) * sr / 1000.0))
        lo, hi = max(start, 0), min(start + dur, n_samples)
        if hi <= lo:
            continue
        tone = _harmonic_tone(dur, base_f0 * 1.5, cue_amps, sr, phase)
        tone = _ramped(tone * level / max(_rms(tone), 1e-12), sr)
        babble[lo:hi] += tone[lo - start:hi - start]
    return babble


def generate_synthetic_dialogue(spec: SyntheticCorpusSpec, dialogue_index: int,
                                speaker_index: int = 0) -> Tuple[AudioTrack, KeypointTrack, List[StrokeAnnotation]]:
    """One speaker's (audio, keypoints, strokes) for the given dialogue."""
    rng = np.random.default_rng([spec.seed, dialogue_index, speaker_index])
    speaker = _speaker_id(dialogue_index, speaker_index)
    base_f0 = float(rng.uniform(100.0, 150.0))

    events = _layout_events(spec, rng)
    n_frames = int(round(spec.dialogue_duration_s * spec.frame_rate_fps))
    n_samples = int(round(spec.dialogue_duration_s * SAMPLE_RATE_HZ))

    frames = _keypoints(spec, events, n_frames, rng)
    audio = _audio(spec, events, n_samples, base_f0, rng)
    peak = float(np.max(np.abs(audio)))
    if peak > 0.95:
        audio *= 0.95 / peak

    strokes = [StrokeAnnotation(speaker, ev.start_ms, ev.end_ms) for ev in events if ev.is_stroke]
    return (AudioTrack(audio, SAMPLE_RATE_HZ, speaker),
            KeypointTrack(frames, spec.frame_rate_fps, speaker),
            strokes)


def write_synthetic_corpus(spec: SyntheticCorpusSpec, out_dir: str | Path, force: bool = False) -> Path:
    """Write every dialogue as WAV + keypoint CSV + annotation CSV and return the manifest path."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out_dir} is not empty (use --force)")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for d in range(spec.n_dialogues):
        dia = dialogue_id(d)
        dialogue_strokes: List[StrokeAnnotation] = []
        speaker_files = []
        for s in range(spec.speakers_per_dialogue):
            audio, keypoints, strokes = generate_synthetic_dialogue(spec, d, s)
            audio_path = out_dir / "audio" / f"{audio.speaker_id}.wav"
            kp_path = out_dir / "keypoints" / f"{audio.speaker_id}.csv"
            save_audio(audio_path, audio)
            save_keypoints(kp_path, keypoints)
            dialogue_strokes.extend(strokes)
            speaker_files.append((audio.speaker_id, audio_path, kp_path))
        ann_path = out_dir / "annotations" / f"{dia}.csv"
        save_annotations(ann_path, sorted(dialogue_strokes, key=lambda s: (s.start_ms, s.speaker_id)))
        entries += [ManifestEntry(dia, spk, a, k, ann_path) for spk, a, k in speaker_files]
        logger.info(f"Synthesised {dia}: {len(dialogue_strokes)} strokes over {spec.speakers_per_dialogue} speakers")

    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest

