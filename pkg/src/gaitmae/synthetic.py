"""Procedural gait generator with known latent parameters.

Stands in for the private cohort: every subject is a set of oscillator
parameters, and the prediction targets are exact functions of them.

Coordinate convention for generated data: x is anteroposterior (forward),
y is vertical (up), z is mediolateral (left positive). Units are roughly
meters before normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .skeleton import DEFAULT_FPS, JOINT_INDEX, N_JOINTS, Activity, SkeletonSequence

PARAM_RANGES: Dict[str, Tuple[float, float]] = {
    "cadence": (80.0, 120.0),
    "stride_len": (0.6, 1.4),
    "arm_swing_amp": (0.0, 0.6),
    "torso_sway_amp": (0.0, 0.1),
    "head_bob_amp": (0.0, 0.05),
    "noise_std": (0.0, 0.02),
}
PARAM_NAMES: Tuple[str, ...] = tuple(PARAM_RANGES)
N_TRAITS = 8
VISIT_PERTURBATION = 0.05  # max per-visit shift, as a fraction of each parameter's range

# segment lengths (m)
_THIGH = 0.48
_SHANK = 0.46
_UPPER_ARM = 0.28
_FOREARM = 0.26
_FOOT_LIFT = 0.12
_FOOT_LIFT_2 = 0.025  # second harmonic; must stay below _FOOT_LIFT / 4 for a single minimum per stride
_ANKLE_BASE = 0.08

_J = JOINT_INDEX
_REST_POSE = {
    "PELVIS": (0.0, 1.00, 0.0),
    "SPINE_NAVEL": (0.0, 1.15, 0.0),
    "SPINE_CHEST": (0.0, 1.32, 0.0),
    "NECK": (0.0, 1.50, 0.0),
    "CLAVICLE_LEFT": (0.0, 1.46, 0.04),
    "SHOULDER_LEFT": (0.0, 1.44, 0.18),
    "CLAVICLE_RIGHT": (0.0, 1.46, -0.04),
    "SHOULDER_RIGHT": (0.0, 1.44, -0.18),
    "HIP_LEFT": (0.0, 0.95, 0.09),
    "HIP_RIGHT": (0.0, 0.95, -0.09),
    "HEAD": (0.02, 1.62, 0.0),
    "NOSE": (0.10, 1.62, 0.0),
    "EYE_LEFT": (0.08, 1.66, 0.03),
    "EAR_LEFT": (0.0, 1.64, 0.07),
    "EYE_RIGHT": (0.08, 1.66, -0.03),
    "EAR_RIGHT": (0.0, 1.64, -0.07),
}
_HEAD_JOINTS = [_J[n] for n in ("HEAD", "NOSE", "EYE_LEFT", "EAR_LEFT", "EYE_RIGHT", "EAR_RIGHT")]
_UPPER_BODY = [_J[n] for n in (
    "SPINE_NAVEL", "SPINE_CHEST", "NECK", "CLAVICLE_LEFT", "SHOULDER_LEFT", "ELBOW_LEFT", "WRIST_LEFT",
    "CLAVICLE_RIGHT", "SHOULDER_RIGHT", "ELBOW_RIGHT", "WRIST_RIGHT",
)] + _HEAD_JOINTS


@dataclass(frozen=True)
class WalkerParams:
    cadence: float = 100.0
    stride_len: float = 1.0
    arm_swing_amp: float = 0.3
    torso_sway_amp: float = 0.03
    head_bob_amp: float = 0.02
    noise_std: float = 0.0
    trait_vector: Tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "trait_vector", tuple(float(t) for t in self.trait_vector))
        self.validate()

    def validate(self) -> None:
        for name, (lo, hi) in PARAM_RANGES.items():
            value = getattr(self, name)
            if not (lo <= value <= hi) or not math.isfinite(value):
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        for t in self.trait_vector:
            if not -1.0 <= t <= 1.0:
                raise ValueError(f"trait value {t} outside [-1, 1]")

    def unit(self) -> np.ndarray:
        """Parameters rescaled to [0, 1] by their ranges."""
        return np.array([(getattr(self, n) - lo) / (hi - lo) for n, (lo, hi) in PARAM_RANGES.items()])

    @classmethod
    def from_unit(cls, u: Sequence[float], traits: Sequence[float] = ()) -> "WalkerParams":
        values = {n: lo + float(np.clip(ui, 0.0, 1.0)) * (hi - lo) for (n, (lo, hi)), ui in zip(PARAM_RANGES.items(), u)}
        return cls(**values, trait_vector=tuple(traits))


def _two_link_knee(hip: np.ndarray, ankle: np.ndarray) -> np.ndarray:
    """Knee position for a sagittal two-link leg bending forward (+x)."""
    d_vec = ankle - hip
    d = np.linalg.norm(d_vec[..., :2], axis=-1, keepdims=True)
    d = np.maximum(d, 1e-9)
    cos_a = np.clip((_THIGH ** 2 + d ** 2 - _SHANK ** 2) / (2 * _THIGH * d), -1.0, 1.0)
    sin_a = np.sqrt(1.0 - cos_a ** 2)
    ux, uy = d_vec[..., :1] / d, d_vec[..., 1:2] / d
    # rotate the hip->ankle direction toward +x so the knee points forward
    kx = ux * cos_a - uy * sin_a
    ky = ux * sin_a + uy * cos_a
    knee = hip.copy()
    knee[..., 0] += _THIGH * kx[..., 0]
    knee[..., 1] += _THIGH * ky[..., 0]
    knee[..., 2] = 0.5 * (hip[..., 2] + ankle[..., 2])
    return knee


def generate_walk(
    params: WalkerParams,
    frames: int = 900,
    fps: float = DEFAULT_FPS,
    rng_seed: int = 0,
    activity: Activity = Activity.TreadmillFixed,
    subject_id: str = "synthetic",
    visit_id: str = "v0",
) -> SkeletonSequence:
    """Animate the 26-joint chain with sinusoidal oscillators.

    Each leg completes one cycle per stride (``cadence / 120`` Hz) with the two
    sides in antiphase; arms swing opposite to the ipsilateral leg. The
    ankle's vertical trace has a single minimum per cycle, at the instant the
    foot is furthest forward (heel strike).
    """
    params.validate()
    if frames < 2:
        raise ValueError("frames must be >= 2")
    if fps <= 0:
        raise ValueError("fps must be positive")
    activity = Activity.parse(activity)
    rng = np.random.default_rng(rng_seed)
    phase0 = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(frames) / fps

    cadence, stride = params.cadence, params.stride_len
    if activity == Activity.TreadmillSelfPace:
        cadence, stride = cadence * 1.08, stride * 1.05
    stride_hz = cadence / 120.0
    phi = 2 * np.pi * stride_hz * t + phase0  # left-leg phase; heel strike at phi = 0 mod 2pi

    pose = np.zeros((frames, N_JOINTS, 3))
    for name, xyz in _REST_POSE.items():
        pose[:, _J[name], :] = xyz

    walking = activity in (Activity.TreadmillFixed, Activity.TreadmillSelfPace, Activity.StationaryWalk)
    ap_amp = stride / 4.0 if activity in (Activity.TreadmillFixed, Activity.TreadmillSelfPace) else 0.0

    if activity == Activity.SitToStand:
        # repetitions at a rate tied to cadence; pelvis drops toward seat height
        rep_hz = cadence / 600.0
        sit = 0.5 * (1 - np.cos(2 * np.pi * rep_hz * t + phase0))
        above_seat = pose[0, :, 1] > 0.5
        pose[:, above_seat, 1] -= 0.45 * sit[:, None]
        pose[:, _UPPER_BODY, 0] += 0.25 * sit[:, None]

    # pelvis vertical bob at step frequency
    if walking:
        pose[:, _J["PELVIS"], 1] += 0.01 * np.cos(2 * phi)

    # legs
    for side, offset in (("LEFT", 0.0), ("RIGHT", np.pi)):
        ph = phi + offset
        hip = pose[:, _J[f"HIP_{side}"], :].copy()
        ankle = np.empty_like(hip)
        ankle[:, 0] = ap_amp * np.cos(ph)
        lift = (_FOOT_LIFT * 0.5 * (1 - np.cos(ph)) + _FOOT_LIFT_2 * 0.5 * (1 - np.cos(2 * ph))) if walking else 0.0
        if activity == Activity.SitToStand:
            ankle[:, 1] = _ANKLE_BASE
        else:
            ankle[:, 1] = _ANKLE_BASE + lift
        ankle[:, 2] = hip[:, 2]
        if activity == Activity.SitToStand:
            knee = hip.copy()
            knee[:, 0] += 0.45 * sit
            knee[:, 1] = 0.52
        else:
            knee = _two_link_knee(hip, ankle)
        pose[:, _J[f"KNEE_{side}"], :] = knee
        pose[:, _J[f"ANKLE_{side}"], :] = ankle
        foot = ankle.copy()
        foot[:, 0] += 0.14
        foot[:, 1] -= 0.05
        pose[:, _J[f"FOOT_{side}"], :] = foot

    # arms: swing in the sagittal plane about the shoulder
    swing_scale = 0.3 if activity in (Activity.Romberg, Activity.SitToStand) else 1.0
    for side, offset in (("LEFT", np.pi), ("RIGHT", 0.0)):
        theta = swing_scale * params.arm_swing_amp * np.cos(phi + offset)
        if activity == Activity.Romberg:
            theta = np.zeros_like(phi)
        shoulder = pose[:, _J[f"SHOULDER_{side}"], :]
        elbow = shoulder.copy()
        elbow[:, 0] += _UPPER_ARM * np.sin(theta)
        elbow[:, 1] -= _UPPER_ARM * np.cos(theta)
        wrist = elbow.copy()
        wrist[:, 0] += _FOREARM * np.sin(theta)
        wrist[:, 1] -= _FOREARM * np.cos(theta)
        pose[:, _J[f"ELBOW_{side}"], :] = elbow
        pose[:, _J[f"WRIST_{side}"], :] = wrist

    # mediolateral torso sway as a lean about the pelvis; slow drift when standing
    if activity == Activity.Romberg:
        sway_phase = 2 * np.pi * 0.25 * t + phase0
        sway_ml = params.torso_sway_amp * np.sin(sway_phase)
        sway_ap = 0.5 * params.torso_sway_amp * np.sin(1.7 * sway_phase + 1.0)
    else:
        sway_ml = params.torso_sway_amp * np.sin(phi)
        sway_ap = np.zeros_like(phi)
    lever = (pose[:, _UPPER_BODY, 1] - pose[:, [_J["PELVIS"]], 1]) / 0.5
    pose[:, _UPPER_BODY, 2] += sway_ml[:, None] * lever
    pose[:, _UPPER_BODY, 0] += sway_ap[:, None] * lever

    # head bob at step frequency
    bob = (1.0 if walking else 0.2) * params.head_bob_amp * np.cos(2 * phi)
    pose[:, _HEAD_JOINTS, 1] += bob[:, None]

    if params.noise_std > 0:
        pose += rng.normal(0.0, params.noise_std, size=pose.shape)

    data = np.concatenate([pose, np.ones((frames, N_JOINTS, 1))], axis=2)
    return SkeletonSequence(subject_id, visit_id, activity, data, fps)


@dataclass
class SyntheticDataset:
    sequences: List[SkeletonSequence]
    targets: Dict[Tuple[str, str], Dict[str, float]]
    params: Dict[Tuple[str, str], WalkerParams]
    target_columns: List[str]


def target_columns(n_traits: int = N_TRAITS) -> List[str]:
    return list(PARAM_NAMES) + [f"trait_{i}" for i in range(n_traits)] + ["age_proxy", "condition_proxy", "nuisance"]


def target_family(name: str) -> str:
    """Body-system analogue used to group synthetic targets for FDR control."""
    if name in PARAM_NAMES:
        return "gait"
    if name.startswith("trait_"):
        return "latent"
    return {"age_proxy": "demographic", "condition_proxy": "condition", "nuisance": "covariate"}.get(name, "other")


def age_proxy(params: WalkerParams) -> float:
    return 50.0 - 0.8 * (params.cadence - 100.0) - 30.0 * (params.arm_swing_amp - 0.3)


def derive_targets(params: WalkerParams, condition_trait: int, condition_threshold: float) -> Dict[str, float]:
    row = {n: float(getattr(params, n)) for n in PARAM_NAMES}
    for i, t in enumerate(params.trait_vector):
        row[f"trait_{i}"] = float(t)
    row["age_proxy"] = age_proxy(params)
    row["condition_proxy"] = float(params.trait_vector[condition_trait] > condition_threshold)
    return row


def generate_dataset(
    n_subjects: int,
    visits_per_subject: int = 1,
    activities: Iterable = (Activity.TreadmillFixed,),
    rng_seed: int = 0,
    frames: int = 900,
    fps: float = DEFAULT_FPS,
    n_traits: int = N_TRAITS,
    condition_trait: int = 0,
    condition_prevalence: float = 0.2,
    noise_range: Tuple[float, float] = PARAM_RANGES["noise_std"],
) -> SyntheticDataset:
    """Draw subjects, perturb them per visit and render every activity.

    The first six traits set the walker parameters (``u = (t + 1) / 2`` on each
    parameter's range); any further traits are latent only. The binary
    ``condition_proxy`` thresholds trait ``condition_trait`` so that its
    expected prevalence is ``condition_prevalence``.
    """
    if n_subjects < 2:
        raise ValueError("n_subjects must be >= 2")
    if visits_per_subject < 1:
        raise ValueError("visits_per_subject must be >= 1")
    if n_traits < len(PARAM_NAMES):
        raise ValueError(f"n_traits must be >= {len(PARAM_NAMES)}")
    if not 0.0 < condition_prevalence < 1.0:
        raise ValueError("condition_prevalence must be in (0, 1)")
    if not 0 <= condition_trait < n_traits:
        raise ValueError("condition_trait out of range")
    lo_noise, hi_noise = noise_range
    lo, hi = PARAM_RANGES["noise_std"]
    if not lo <= lo_noise <= hi_noise <= hi:
        raise ValueError("noise_range outside the noise_std range")
    acts = [Activity.parse(a) for a in activities]
    if not acts:
        raise ValueError("at least one activity required")
    threshold = 1.0 - 2.0 * condition_prevalence

    noise_idx = PARAM_NAMES.index("noise_std")
    span = hi - lo
    sequences, targets, params_map = [], {}, {}
    for s in range(n_subjects):
        srng = np.random.default_rng(np.random.SeedSequence([rng_seed, s]))
        traits = srng.uniform(-1.0, 1.0, size=n_traits)
        u_subject = (traits[: len(PARAM_NAMES)] + 1.0) / 2.0
        u_subject[noise_idx] = ((lo_noise - lo) + u_subject[noise_idx] * (hi_noise - lo_noise)) / span
        sid = f"S{s:04d}"
        # subject-level covariate independent of everything the walker does
        nuisance = float(np.random.default_rng(np.random.SeedSequence([rng_seed, s, 99991])).normal())
        for v in range(visits_per_subject):
            vrng = np.random.default_rng(np.random.SeedSequence([rng_seed, s, v]))
            u = u_subject + vrng.uniform(-VISIT_PERTURBATION, VISIT_PERTURBATION, size=u_subject.shape)
            u = np.clip(u, 0.0, 1.0)
            u[noise_idx] = np.clip(u[noise_idx], (lo_noise - lo) / span, (hi_noise - lo) / span)
            visit_traits = traits.copy()
            visit_traits[: len(PARAM_NAMES)] = np.clip(2.0 * u - 1.0, -1.0, 1.0)
            p = WalkerParams.from_unit(u, visit_traits)
            vid = f"v{v}"
            params_map[(sid, vid)] = p
            targets[(sid, vid)] = derive_targets(p, condition_trait, threshold)
            targets[(sid, vid)]["nuisance"] = nuisance
            for a in acts:
                seed = int(np.random.SeedSequence([rng_seed, s, v, int(a)]).generate_state(1)[0])
                sequences.append(generate_walk(p, frames, fps, seed, a, sid, vid))
    return SyntheticDataset(sequences, targets, params_map, target_columns(n_traits))
