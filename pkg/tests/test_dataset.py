from __future__ import annotations

import pytest

from app.core.config import settings
from app.core.errors import ConfigError, FormatError
from app.services import dataset
from app.services.dataset import PreprocessedCorpus, preprocess
from app.services.windowing import WindowingConfig


def _cache_files(cache):
    return sorted(p.name for p in cache.rglob("*") if p.is_file())


def test_rerun_replaces_buffers_of_the_previous_cache(tiny_corpus_dir, tmp_path):
    manifest = tiny_corpus_dir / "corpus" / "manifest.csv"
    cache = tmp_path / "cache"
    preprocess(manifest, cache, WindowingConfig(), (0, 500), settings.JOINT_TABLE)
    preprocess(manifest, cache, WindowingConfig(), (0,), settings.JOINT_TABLE)

    corpus = PreprocessedCorpus.open(cache)
    assert corpus.buffers_ms == [0]
    assert not (cache / "mel_500.bin").exists()
    with pytest.raises(ConfigError):
        corpus.tensors(corpus.sequences[:1], 500)


def test_failing_track_leaves_no_loadable_cache(tiny_corpus_dir, tmp_path, monkeypatch):
    manifest = tiny_corpus_dir / "corpus" / "manifest.csv"
    cache = tmp_path / "cache"
    preprocess(manifest, cache, WindowingConfig(), (0,), settings.JOINT_TABLE)
    assert (cache / "pose.bin").exists()

    process_track = dataset._process_track
    calls = []

    def fail_on_second_track(job):
        calls.append(job[0].speaker_id)
        if len(calls) == 2:
            raise FormatError(f"{job[0].keypoint_path}: corrupt keypoint row")
        return process_track(job)

    monkeypatch.setattr(dataset, "_process_track", fail_on_second_track)
    with pytest.raises(FormatError):
        preprocess(manifest, cache, WindowingConfig(), (0,), settings.JOINT_TABLE)

    assert len(calls) == 2
    assert _cache_files(cache) == []
    with pytest.raises(ConfigError):
        PreprocessedCorpus.open(cache)


def test_tensors_follow_sequence_rows(tiny_corpus):
    seqs = tiny_corpus.sequences[:2]
    pose, mel, labels = tiny_corpus.tensors(seqs, 500)
    assert pose.shape == (2, 40, 3, 15, 27)
    assert mel.shape[:3] == (2, 40, 64)
    assert labels.tolist() == [[int(w.label) for w in s.windows] for s in seqs]

    pose_only, no_mel, _ = tiny_corpus.tensors(seqs, 250, mel=False)
    assert no_mel is None
    assert pose_only.shape == pose.shape
