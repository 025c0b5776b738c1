"""Engineered gait descriptors and correlation-based redundancy reduction.

A small, documented subset of the classic clinical battery: cadence and
stride length from heel strikes, the Prieto postural-sway measures, and a
sit-to-stand repetition count. Axis convention follows the generator:
x anteroposterior, y vertical, z mediolateral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.signal import find_peaks, savgol_filter
from scipy.spatial.distance import squareform

from .skeleton import JOINT_INDEX, WALKING_ACTIVITIES, Activity, SkeletonSequence

AP, VERTICAL, ML = 0, 1, 2
CHI2_95_2DOF = 5.991
MIN_STRIKE_SEPARATION_S = 0.3
MIN_STRIKE_PROMINENCE = 0.1  # fraction of the ankle trace's 5-95 percentile range
TORSO_JOINTS = (0, 1, 2, 3)

FEATURE_REGISTRY: Tuple[str, ...] = (
    "cadence",
    "stride_len_left",
    "stride_len_right",
    "step_len",
    "sway_rms_distance",
    "sway_ellipse_area_95",
    "sway_mean_velocity",
    "sway_path",
    "sway_amplitude_AP",
    "sway_amplitude_ML",
    "sts_repetitions",
)


class InsufficientGaitCycles(ValueError):
    def __init__(self, msg: str = "insufficient gait cycles"):
        super().__init__(msg)


@dataclass
class FeatureVector:
    subject_id: str
    visit_id: str
    activity: Activity
    values: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.values.items():
            if name not in FEATURE_REGISTRY:
                raise ValueError(f"unregistered feature {name!r}")
            if not math.isfinite(v):
                raise ValueError(f"feature {name!r} is not finite")


def _ankle(side: str) -> int:
    side = side.lower()
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    return JOINT_INDEX[f"ANKLE_{side.upper()}"]


def detect_heel_strikes(seq: SkeletonSequence, side: str) -> List[int]:
    """Frames where the ankle height reaches a local minimum below its median.

    The trace is first smoothed with a 0.2 s quadratic Savitzky-Golay filter.
    Minima closer than 0.3 s to a deeper one are discarded, as are minima whose
    prominence is under a tenth of the trace's robust range (sensor noise).
    """
    y = seq.data[:, _ankle(side), VERTICAL]
    win = 2 * int(round(0.1 * seq.fps)) + 1
    if 3 <= win <= len(y):
        y = savgol_filter(y, win, 2, mode="nearest")
    distance = max(1, int(math.ceil(MIN_STRIKE_SEPARATION_S * seq.fps)))
    lo, hi = np.percentile(y, [5, 95])
    prominence = MIN_STRIKE_PROMINENCE * (hi - lo)
    if prominence <= 0:
        raise InsufficientGaitCycles()
    peaks, _ = find_peaks(-y, height=-np.median(y), distance=distance, prominence=prominence)
    if len(peaks) < 2:
        raise InsufficientGaitCycles()
    return sorted(int(p) for p in peaks)


def cadence(seq: SkeletonSequence) -> float:
    """Steps per minute from the pooled left and right heel strikes."""
    strikes: List[int] = []
    for side in ("left", "right"):
        try:
            strikes.extend(detect_heel_strikes(seq, side))
        except InsufficientGaitCycles:
            pass
    strikes.sort()
    if len(strikes) < 2 or strikes[-1] == strikes[0]:
        raise InsufficientGaitCycles()
    elapsed = (strikes[-1] - strikes[0]) / seq.fps
    return 60.0 * (len(strikes) - 1) / elapsed


def stride_length(seq: SkeletonSequence, side: str) -> float:
    """Treadmill stride-length proxy from the foot's excursion relative to the pelvis.

    Per stride (consecutive same-side strikes), the anteroposterior excursion
    is taken as the peak-to-peak span of the sinusoid with the same RMS,
    ``2 * sqrt(2) * std``, which is far less noise-sensitive than a raw range.
    On a belt, the foot covers that excursion twice per stride, so the
    estimate is twice the mean excursion.
    """
    strikes = detect_heel_strikes(seq, side)
    rel = seq.data[:, _ankle(side), AP] - seq.data[:, JOINT_INDEX["PELVIS"], AP]
    excursions = [2.0 * math.sqrt(2.0) * float(np.std(rel[a:b])) for a, b in zip(strikes[:-1], strikes[1:])]
    return 2.0 * float(np.mean(excursions))


def com_trace(seq: SkeletonSequence) -> np.ndarray:
    """Torso centroid on the horizontal plane, columns (AP, ML)."""
    centroid = seq.data[:, list(TORSO_JOINTS), :3].mean(axis=1)
    return centroid[:, [AP, ML]]


def sway_metrics_from_trace(trace: np.ndarray, fps: float) -> Dict[str, float]:
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 2 or trace.shape[1] != 2:
        raise ValueError("trace must be (frames, 2)")
    if trace.shape[0] < 2:
        raise ValueError("need at least 2 frames for sway metrics")
    centered = trace - trace.mean(axis=0)
    dist = np.linalg.norm(centered, axis=1)
    cov = np.cov(centered, rowvar=False)
    det = max(float(np.linalg.det(cov)), 0.0)
    path = float(np.linalg.norm(np.diff(trace, axis=0), axis=1).sum())
    duration = (trace.shape[0] - 1) / fps
    return {
        "rms_distance": float(np.sqrt(np.mean(dist ** 2))),
        "ellipse_area_95": float(math.pi * CHI2_95_2DOF * math.sqrt(det)),
        "mean_velocity": path / duration,
        "sway_path": path,
        "amplitude_AP": float(np.ptp(trace[:, 0])),
        "amplitude_ML": float(np.ptp(trace[:, 1])),
    }


def sway_metrics(seq: SkeletonSequence) -> Dict[str, float]:
    return sway_metrics_from_trace(com_trace(seq), seq.fps)


def sit_to_stand_repetitions(seq: SkeletonSequence) -> int:
    """Upward crossings of the torso height through its mean, with a hysteresis band."""
    h = seq.data[:, list(TORSO_JOINTS), VERTICAL].mean(axis=1)
    h = h - h.mean()
    band = 0.25 * float(np.std(h))
    if band == 0.0:
        return 0
    count, state = 0, None
    for v in h:
        if v > band:
            if state == "low":
                count += 1
            state = "high"
        elif v < -band:
            state = "low"
    return count


def extract_features(seq: SkeletonSequence) -> FeatureVector:
    """Activity-appropriate descriptors for one recording."""
    values: Dict[str, float] = {}
    if seq.activity in WALKING_ACTIVITIES:
        try:
            values["cadence"] = cadence(seq)
            left, right = stride_length(seq, "left"), stride_length(seq, "right")
            values["stride_len_left"] = left
            values["stride_len_right"] = right
            values["step_len"] = 0.25 * (left + right)
        except InsufficientGaitCycles:
            pass
    if seq.activity in (Activity.Romberg, Activity.StationaryWalk):
        for k, v in sway_metrics(seq).items():
            values[k if k.startswith("sway_") else f"sway_{k}"] = v
    if seq.activity == Activity.SitToStand:
        values["sts_repetitions"] = float(sit_to_stand_repetitions(seq))
    return FeatureVector(seq.subject_id, seq.visit_id, seq.activity, values)


def feature_table_rows(vectors: Iterable[FeatureVector]) -> Tuple[List[str], List[list]]:
    """Long-format TSV rows: one per (subject, visit, activity); blank where not applicable."""
    header = ["subject_id", "visit_id", "activity", *FEATURE_REGISTRY]
    rows = []
    for fv in vectors:
        rows.append([fv.subject_id, fv.visit_id, fv.activity.name] + [fv.values.get(n, "") for n in FEATURE_REGISTRY])
    return header, rows


def feature_matrix(vectors: Iterable[FeatureVector]) -> Tuple[List[Tuple[str, str]], List[str], np.ndarray]:
    """Wide matrix keyed by (subject, visit) with ``Activity:feature`` columns.

    Columns missing for any subject-visit are dropped.
    """
    table: Dict[Tuple[str, str], Dict[str, float]] = {}
    for fv in vectors:
        row = table.setdefault((fv.subject_id, fv.visit_id), {})
        for name, v in fv.values.items():
            row[f"{fv.activity.name}:{name}"] = v
    keys = sorted(table)
    names = sorted(set.intersection(*(set(r) for r in table.values()))) if table else []
    X = np.array([[table[k][n] for n in names] for k in keys], dtype=np.float64).reshape(len(keys), len(names))
    return keys, names, X


def reduce_redundancy(X: np.ndarray, names: Sequence[str], threshold: float = 0.85) -> List[str]:
    """Keep one representative per cluster of mutually correlated features.

    Complete-linkage clustering on ``1 - |r|``, cut at ``1 - threshold``. The
    representative is the member with the lowest mean ``|r|`` to features
    outside its cluster; ties go to the lexicographically smallest name.
    Zero-variance features are dropped before clustering.
    """
    X = np.asarray(X, dtype=np.float64)
    names = list(names)
    if X.size == 0 or not names:
        raise ValueError("empty feature matrix")
    if X.ndim != 2 or X.shape[1] != len(names):
        raise ValueError("X must be (samples, len(names))")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples per feature")
    keep = np.std(X, axis=0) > 0
    X, names = X[:, keep], [n for n, k in zip(names, keep) if k]
    if len(names) <= 1:
        return names
    absr = np.abs(np.corrcoef(X, rowvar=False))
    np.fill_diagonal(absr, 1.0)
    dist = np.clip(1.0 - absr, 0.0, None)
    Z = linkage(squareform(dist, checks=False), method="complete")
    labels = fcluster(Z, t=1.0 - threshold, criterion="distance")
    chosen = set()
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        outside = np.flatnonzero(labels != lab)
        if len(outside):
            score = absr[np.ix_(members, outside)].mean(axis=1)
        else:
            score = np.zeros(len(members))
        best = min(zip(score.round(12), (names[m] for m in members)))
        chosen.add(best[1])
    return [n for n in names if n in chosen]
