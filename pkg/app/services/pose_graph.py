"""
Upper-body skeleton graph over 27 of the 133 whole-body keypoints.

The joint table (index, name, parent) lives in app/data/joints_27.csv; parent is the
133-layout index of the anatomical parent, -1 for the root. Spatial edges are the
parent links; temporal edges are realized by the vision backbone's temporal convolution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.sparse.csgraph import connected_components

from app.core.config import settings
from app.core.errors import ConfigError, FormatError
from app.services.corpus_io import N_KEYPOINTS, KeypointTrack
from app.services.windowing import WINDOW_FRAMES

logger = logging.getLogger(__name__)

N_JOINTS = 27
MIN_SHOULDER_DISTANCE = 1e-6


@dataclass(frozen=True)
class JointSelection:
    indices: Tuple[int, ...]
    names: Tuple[str, ...]
    parents: Tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) != N_JOINTS:
            raise ConfigError(f"joint selection must have {N_JOINTS} joints, got {len(self.indices)}")
        if len(set(self.indices)) != len(self.indices):
            raise ConfigError("joint selection indices must be unique")
        if len(self.names) != len(self.indices) or len(self.parents) != len(self.indices):
            raise ConfigError("joint selection names/parents must parallel indices")
        if any(not 0 <= i < N_KEYPOINTS for i in self.indices):
            raise ConfigError(f"joint indices must lie in [0, {N_KEYPOINTS})")

    def position(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"joint {name} not in selection") from None

    def parent_positions(self) -> list[int]:
        """Parent of each joint as a position within the selection (-1 for roots)."""
        pos = {idx: p for p, idx in enumerate(self.indices)}
        out = []
        for name, parent in zip(self.names, self.parents):
            if parent < 0:
                out.append(-1)
            elif parent in pos:
                out.append(pos[parent])
            else:
                raise ConfigError(f"parent {parent} of joint {name} is not part of the selection")
        return out

    @classmethod
    def from_table(cls, path: str | Path) -> "JointSelection":
        try:
            df = pd.read_csv(path)
        except OSError as e:
            raise ConfigError(f"cannot read joint table {path}: {e}") from e
        if list(df.columns[:3]) != ["index", "name", "parent"]:
            raise FormatError(f"{path}: expected columns index,name,parent")
        return cls(tuple(int(i) for i in df["index"]), tuple(str(n) for n in df["name"]),
                   tuple(int(p) for p in df["parent"]))


@lru_cache(maxsize=None)
def default_selection(path: Optional[str] = None) -> JointSelection:
    return JointSelection.from_table(path or settings.JOINT_TABLE)


@dataclass(frozen=True)
class SkeletonAdjacency:
    A: np.ndarray
    A_norm: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(np.triu(self.A, 1).sum())


@dataclass(frozen=True)
class PoseWindow:
    """values: (3, 15, 27) channels x, y, confidence; flagged when normalization fell back."""
    values: np.ndarray
    flagged: bool = False


def select_joints(frame: np.ndarray, selection: Optional[JointSelection] = None) -> np.ndarray:
    """(..., 133, 3) -> (..., 27, 3) in the selection's order."""
    selection = selection or default_selection()
    frame = np.asarray(frame)
    if frame.shape[-2] != N_KEYPOINTS:
        raise FormatError(f"expected {N_KEYPOINTS} joints, got {frame.shape[-2]}")
    return frame[..., list(selection.indices), :]


def normalize_pose(values: np.ndarray, selection: Optional[JointSelection] = None) -> Tuple[np.ndarray, bool]:
    """
    values: (3, T, 27). Subtract the mid-shoulder point of the first frame where both
    shoulders are confident and divide x, y by that frame's shoulder distance.
    Returns (normalized, flagged); flagged windows had no confident frame or a
    degenerate shoulder distance.
    """
    selection = selection or default_selection()
    left, right = selection.position("left_shoulder"), selection.position("right_shoulder")
    out = np.array(values, dtype=np.float64, copy=True)
    conf = out[2]
    confident = np.flatnonzero((conf[:, left] > 0) & (conf[:, right] > 0))
    if confident.size == 0:
        return out, True

    t = int(confident[0])
    l_xy, r_xy = out[:2, t, left], out[:2, t, right]
    center = (l_xy + r_xy) / 2.0
    distance = float(np.linalg.norm(l_xy - r_xy))
    flagged = distance < MIN_SHOULDER_DISTANCE
    scale = 1.0 if flagged else distance
    out[:2] = (out[:2] - center[:, None, None]) / scale
    return out, flagged


def adjacency_from_parents(parents: Sequence[int]) -> SkeletonAdjacency:
    """Symmetric parent-link adjacency and D^-1/2 (A + I) D^-1/2; the graph must be connected."""
    n = len(parents)
    A = np.zeros((n, n))
    for child, parent in enumerate(parents):
        if parent >= 0:
            A[child, parent] = A[parent, child] = 1.0
    n_components, _ = connected_components(A, directed=False)
    if n_components != 1:
        raise ConfigError(f"skeleton has {n_components} disconnected parts")
    A_hat = A + np.eye(n)
    d = 1.0 / np.sqrt(A_hat.sum(axis=1))
    return SkeletonAdjacency(A=A, A_norm=d[:, None] * A_hat * d[None, :])


def build_adjacency(selection: Optional[JointSelection] = None) -> SkeletonAdjacency:
    selection = selection or default_selection()
    return adjacency_from_parents(selection.parent_positions())


def pose_window(track: KeypointTrack, start_frame: int, selection: Optional[JointSelection] = None,
                n_frames: int = WINDOW_FRAMES, normalize: bool = True) -> PoseWindow:
    """(3, 15, 27) window; frames past either end of the track repeat the edge frame."""
    selection = selection or default_selection()
    if track.n_frames == 0:
        logger.warning(f"{track.speaker_id}: empty keypoint track, pose window at frame {start_frame} is all zeros")
        values = np.zeros((3, n_frames, N_JOINTS))
        return PoseWindow(values.astype(np.float32), flagged=True)

    idx = np.clip(np.arange(start_frame, start_frame + n_frames), 0, track.n_frames - 1)
    joints = select_joints(track.frames[idx], selection)  # (T, 27, 3)
    values = np.transpose(joints, (2, 0, 1))
    flagged = False
    if normalize:
        values, flagged = normalize_pose(values, selection)
        if flagged:
            logger.warning(f"{track.speaker_id}: pose window at frame {start_frame} has no confident shoulders "
                           f"or a degenerate shoulder distance, left unnormalized")
    return PoseWindow(values=values.astype(np.float32), flagged=flagged)
