"""Skeleton data model, preprocessing chain and jitter augmentation.

A recording is a ``(frames, 26, 4)`` array: three coordinate channels
followed by a per-joint detection confidence in ``[0, 1]``. The 26 joints are
the depth-camera body-tracking skeleton with the six hand/thumb joints
removed, in source order.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.ndimage import median_filter as _nd_median_filter

logger = logging.getLogger(__name__)

SOURCE_JOINT_NAMES: Tuple[str, ...] = (
    "PELVIS", "SPINE_NAVEL", "SPINE_CHEST", "NECK",
    "CLAVICLE_LEFT", "SHOULDER_LEFT", "ELBOW_LEFT", "WRIST_LEFT",
    "HAND_LEFT", "HANDTIP_LEFT", "THUMB_LEFT",
    "CLAVICLE_RIGHT", "SHOULDER_RIGHT", "ELBOW_RIGHT", "WRIST_RIGHT",
    "HAND_RIGHT", "HANDTIP_RIGHT", "THUMB_RIGHT",
    "HIP_LEFT", "KNEE_LEFT", "ANKLE_LEFT", "FOOT_LEFT",
    "HIP_RIGHT", "KNEE_RIGHT", "ANKLE_RIGHT", "FOOT_RIGHT",
    "HEAD", "NOSE", "EYE_LEFT", "EAR_LEFT", "EYE_RIGHT", "EAR_RIGHT",
)
DROPPED_SOURCE_JOINTS: Tuple[int, ...] = (8, 9, 10, 15, 16, 17)
RETAINED_SOURCE_JOINTS: Tuple[int, ...] = tuple(
    i for i in range(len(SOURCE_JOINT_NAMES)) if i not in DROPPED_SOURCE_JOINTS
)
JOINT_NAMES: Tuple[str, ...] = tuple(SOURCE_JOINT_NAMES[i] for i in RETAINED_SOURCE_JOINTS)
JOINT_INDEX: Dict[str, int] = {name: i for i, name in enumerate(JOINT_NAMES)}

N_JOINTS = 26
N_CHANNELS = 4
DEFAULT_FPS = 30.0
DEFAULT_LENGTH = 900

PELVIS = JOINT_INDEX["PELVIS"]
SPINE_NAVEL = JOINT_INDEX["SPINE_NAVEL"]


@dataclass(frozen=True)
class JointTaxonomy:
    """Joint names plus the two anatomical partitions used by the pipeline."""

    joint_names: Tuple[str, ...]
    masking_groups: Dict[str, Tuple[int, ...]]
    attribution_groups: Dict[str, Tuple[int, ...]]

    def __post_init__(self):
        n = len(self.joint_names)
        for label, groups in (("masking", self.masking_groups), ("attribution", self.attribution_groups)):
            flat = sorted(j for g in groups.values() for j in g)
            if flat != list(range(n)):
                raise ValueError(f"{label} groups do not partition the {n} joints")


TAXONOMY = JointTaxonomy(
    joint_names=JOINT_NAMES,
    masking_groups={
        "LeftLeg": (12, 13, 14, 15),
        "RightLeg": (16, 17, 18, 19),
        "LeftArm": (4, 5, 6, 7),
        "RightArm": (8, 9, 10, 11),
        "Torso": (0, 1, 2, 3),
        "Head": (20, 21, 22, 23, 24, 25),
    },
    attribution_groups={
        "Head": (20, 21, 22, 23, 24, 25),
        "Torso": (0, 1, 2, 3),
        "Arms": (4, 5, 6, 7, 8, 9, 10, 11),
        "Legs": (12, 13, 14, 15, 16, 17, 18, 19),
    },
)
MASKING_GROUP_ORDER: Tuple[str, ...] = ("LeftLeg", "RightLeg", "LeftArm", "RightArm", "Torso", "Head")
ATTRIBUTION_GROUP_ORDER: Tuple[str, ...] = ("Head", "Torso", "Arms", "Legs")


class Activity(enum.IntEnum):
    TreadmillFixed = 0
    TreadmillSelfPace = 1
    SitToStand = 2
    StationaryWalk = 3
    Romberg = 4

    @classmethod
    def parse(cls, value) -> "Activity":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value)]
        except KeyError:
            lowered = {a.name.lower(): a for a in cls}
            key = str(value).lower()
            if key in lowered:
                return lowered[key]
            raise ValueError(f"unknown activity {value!r}; valid: {[a.name for a in cls]}") from None


WALKING_ACTIVITIES = frozenset({Activity.TreadmillFixed, Activity.TreadmillSelfPace, Activity.StationaryWalk})
TREADMILL_ACTIVITIES = frozenset({Activity.TreadmillFixed, Activity.TreadmillSelfPace})


@dataclass
class SkeletonSequence:
    subject_id: str
    visit_id: str
    activity: Activity
    data: np.ndarray
    fps: float = DEFAULT_FPS
    sequence_index: int = 0

    def __post_init__(self):
        self.activity = Activity.parse(self.activity)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != N_CHANNELS:
            raise ValueError(f"expected (frames, joints, {N_CHANNELS}) data, got {self.data.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        conf = self.data[..., 3]
        if conf.size and (conf.min() < 0 or conf.max() > 1):
            raise ValueError("confidence channel must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def confidence(self) -> np.ndarray:
        return self.data[..., 3]

    def with_data(self, data: np.ndarray) -> "SkeletonSequence":
        return replace(self, data=data)


def median_filter(seq: SkeletonSequence, window: int = 3) -> SkeletonSequence:
    """Temporal median filter on the coordinate channels, nearest-edge padding."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd positive integer")
    if window > seq.n_frames:
        raise ValueError(f"window {window} exceeds sequence length {seq.n_frames}")
    out = seq.data.copy()
    out[..., :3] = _nd_median_filter(seq.data[..., :3], size=(window, 1, 1), mode="nearest")
    return seq.with_data(out)


def normalize_frames(
    seq: SkeletonSequence,
    centroid_joints: Sequence[int] = (PELVIS,),
) -> Tuple[SkeletonSequence, List[int]]:
    """Center each frame on the centroid joints and scale by the largest joint norm.

    Returns the normalized sequence and the indices of degenerate frames, which
    are left unscaled.
    """
    xyz = seq.data[..., :3]
    if not np.all(np.isfinite(xyz)):
        raise ValueError("coordinates must be finite")
    idx = list(centroid_joints)
    centered = xyz - xyz[:, idx, :].mean(axis=1, keepdims=True)
    scale = np.linalg.norm(centered, axis=2).max(axis=1)
    degenerate = scale < 1e-9
    scale = np.where(degenerate, 1.0, scale)
    out = seq.data.copy()
    out[..., :3] = centered / scale[:, None, None]
    flagged = np.flatnonzero(degenerate).tolist()
    if flagged:
        logger.warning("%d degenerate frame(s) left unscaled in %s/%s", len(flagged), seq.subject_id, seq.visit_id)
    return seq.with_data(out), flagged


def window_to_length(seq: SkeletonSequence, target: int = DEFAULT_LENGTH) -> SkeletonSequence:
    """Truncate from the start of the recording, or pad with the last frame at confidence 0."""
    n = seq.n_frames
    if n == 0:
        raise ValueError("cannot window an empty sequence")
    if n >= target:
        return seq.with_data(seq.data[:target].copy())
    pad = np.repeat(seq.data[-1:], target - n, axis=0)
    pad[..., 3] = 0.0
    return seq.with_data(np.concatenate([seq.data, pad], axis=0))


def split_windows(seq: SkeletonSequence, target: int = DEFAULT_LENGTH, max_windows: int = 1) -> List[SkeletonSequence]:
    """Cut up to ``max_windows`` non-overlapping windows from the start.

    The first window is always produced (padded if short); later windows only
    when the recording holds a full ``target`` frames for them.
    """
    if max_windows < 1:
        raise ValueError("max_windows must be >= 1")
    first = window_to_length(seq, target)
    first.sequence_index = 0
    windows = [first]
    for k in range(1, max_windows):
        start = k * target
        if start + target > seq.n_frames:
            break
        windows.append(replace(seq, data=seq.data[start:start + target].copy(), sequence_index=k))
    return windows


def gaussian_jitter(seq: SkeletonSequence, sigma: float = 0.05, rng_seed: int = 0) -> SkeletonSequence:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = seq.data.copy()
    if sigma > 0:
        rng = np.random.default_rng(rng_seed)
        out[..., :3] += rng.normal(0.0, sigma, size=out[..., :3].shape)
    return seq.with_data(out)


def drop_low_confidence_joints(
    raw32: np.ndarray,
    subject_id: str = "",
    visit_id: str = "",
    activity: Activity = Activity.TreadmillFixed,
    fps: float = DEFAULT_FPS,
) -> SkeletonSequence:
    """Project a 32-joint source recording onto the canonical 26 joints."""
    raw32 = np.asarray(raw32)
    if raw32.ndim != 3 or raw32.shape[1] != len(SOURCE_JOINT_NAMES) or raw32.shape[2] != N_CHANNELS:
        raise ValueError(
            f"expected (frames, {len(SOURCE_JOINT_NAMES)}, {N_CHANNELS}) source data, got {raw32.shape}"
        )
    return SkeletonSequence(subject_id, visit_id, activity, raw32[:, RETAINED_SOURCE_JOINTS, :].copy(), fps)


def preprocess(
    seq: SkeletonSequence,
    target: int = DEFAULT_LENGTH,
    window: int = 3,
    centroid_joints: Sequence[int] = (PELVIS,),
) -> SkeletonSequence:
    """Window, median-filter and normalize: the full chain in pipeline order."""
    seq = window_to_length(seq, target)
    seq = median_filter(seq, window)
    seq, _ = normalize_frames(seq, centroid_joints)
    return seq
