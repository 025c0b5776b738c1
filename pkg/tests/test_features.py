import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_seq
from gaitmae.features import (
    CHI2_95_2DOF,
    InsufficientGaitCycles,
    cadence,
    detect_heel_strikes,
    extract_features,
    feature_matrix,
    reduce_redundancy,
    sit_to_stand_repetitions,
    stride_length,
    sway_metrics,
    sway_metrics_from_trace,
)
from gaitmae.skeleton import JOINT_INDEX, Activity
from gaitmae.synthetic import WalkerParams, generate_walk


@pytest.fixture(scope="module")
def walk100():
    return generate_walk(WalkerParams(cadence=100.0, stride_len=1.0, noise_std=0.005), 900, rng_seed=0)


def test_heel_strike_count(walk100):
    for side in ("left", "right"):
        strikes = detect_heel_strikes(walk100, side)
        # 100 steps/min for 30 s = 50 steps, one per side per stride -> 25 per side
        assert abs(len(strikes) - 25) <= 2
        assert all(b > a for a, b in zip(strikes, strikes[1:]))


def test_stationary_pose_has_no_cycles():
    still = make_seq(np.tile(np.random.default_rng(0).normal(size=(1, 26, 3)), (300, 1, 1)))
    with pytest.raises(InsufficientGaitCycles, match="insufficient gait cycles"):
        detect_heel_strikes(still, "left")
    with pytest.raises(InsufficientGaitCycles):
        cadence(still)


@pytest.mark.parametrize("cad", [90.0, 100.0])
def test_cadence(cad):
    seq = generate_walk(WalkerParams(cadence=cad, noise_std=0.005), 900, rng_seed=1)
    assert abs(cadence(seq) - cad) <= 3


def test_cadence_time_base_invariant(walk100):
    fast = generate_walk(WalkerParams(cadence=100.0, noise_std=0.0), 1800, fps=60.0, rng_seed=0)
    slow = generate_walk(WalkerParams(cadence=100.0, noise_std=0.0), 900, fps=30.0, rng_seed=0)
    assert abs(cadence(fast) - cadence(slow)) < 1.0


def test_cadence_scale_and_translation_invariant(walk100):
    shifted = walk100.data.copy()
    shifted[..., :3] = 2.0 * shifted[..., :3] + np.array([0.3, -1.0, 4.0])
    assert cadence(walk100.with_data(shifted)) == pytest.approx(cadence(walk100), abs=1e-9)


def test_stride_length(walk100):
    left, right = stride_length(walk100, "left"), stride_length(walk100, "right")
    assert abs(left - 1.0) <= 0.1
    assert abs(left - right) < 0.05


def test_stride_length_zero_oscillation():
    seq = generate_walk(WalkerParams(stride_len=1.0, noise_std=0.0), 300, rng_seed=0)
    data = seq.data.copy()
    for side in ("LEFT", "RIGHT"):
        data[:, JOINT_INDEX[f"ANKLE_{side}"], 0] = data[:, JOINT_INDEX["PELVIS"], 0]
    assert stride_length(seq.with_data(data), "left") == pytest.approx(0.0, abs=1e-12)


def test_ellipse_area_monte_carlo():
    trace = np.random.default_rng(5).normal(0, 0.01, size=(10_000, 2))
    m = sway_metrics_from_trace(trace, 30.0)
    expected = math.pi * CHI2_95_2DOF * 0.01 ** 2
    assert abs(m["ellipse_area_95"] - expected) <= 0.1 * expected


def test_sway_still_and_homogeneity():
    still = sway_metrics_from_trace(np.ones((50, 2)), 30.0)
    assert all(v == 0 for v in still.values())
    trace = np.random.default_rng(6).normal(size=(200, 2))
    a = sway_metrics_from_trace(trace, 30.0)
    b = sway_metrics_from_trace(2 * trace, 30.0)
    assert b["rms_distance"] == pytest.approx(2 * a["rms_distance"])
    assert b["ellipse_area_95"] == pytest.approx(4 * a["ellipse_area_95"])
    c = sway_metrics_from_trace(trace + 7.0, 30.0)
    for k in a:
        assert c[k] == pytest.approx(a[k])
    assert a["mean_velocity"] == pytest.approx(a["sway_path"] / (199 / 30.0))
    with pytest.raises(ValueError):
        sway_metrics_from_trace(np.zeros((1, 2)), 30.0)


def test_sit_to_stand_repetitions():
    t = np.arange(600) / 30.0
    data = np.zeros((600, 26, 3))
    data[:, :, 1] = 0.2 * np.sin(2 * np.pi * 0.25 * t)[:, None]
    assert sit_to_stand_repetitions(make_seq(data, activity=Activity.SitToStand)) in (4, 5)


def test_extract_features_by_activity(walk100):
    fv = extract_features(walk100)
    assert {"cadence", "stride_len_left", "stride_len_right", "step_len"} <= set(fv.values)
    romberg = generate_walk(WalkerParams(), 200, rng_seed=0, activity=Activity.Romberg)
    fr = extract_features(romberg)
    assert "sway_ellipse_area_95" in fr.values and "cadence" not in fr.values
    keys, names, X = feature_matrix([fv, fr])
    assert X.shape == (1, len(names))


def test_reduce_redundancy_pairs():
    rng = np.random.default_rng(0)
    a, c = rng.normal(size=100), rng.normal(size=100)
    X = np.column_stack([a, 3 * a + 1, c])
    kept = reduce_redundancy(X, ["a", "b", "c"])
    assert len(kept) == 2 and "c" in kept and len({"a", "b"} & set(kept)) == 1


def test_reduce_redundancy_duplicates_and_zero_variance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 4))
    X = np.column_stack([X, X[:, 0], np.ones(60)])
    kept = reduce_redundancy(X, ["f0", "f1", "f2", "f3", "dup", "const"])
    assert "const" not in kept
    assert not {"f0", "dup"} <= set(kept)
    assert len(kept) == 4
    with pytest.raises(ValueError):
        reduce_redundancy(np.zeros((0, 0)), [])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 0.95))
def test_reduce_redundancy_cluster_property(seed, thr):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(40, 3))
    X = np.column_stack([base, base[:, :2] + 0.3 * rng.normal(size=(40, 2))])
    names = [f"x{i}" for i in range(X.shape[1])]
    kept = reduce_redundancy(X, names, thr)
    assert set(kept) <= set(names) and kept
    absr = np.abs(np.corrcoef(X, rowvar=False))
    for i, n in enumerate(names):
        if n in kept:
            continue
        assert any(absr[i, names.index(k)] > thr for k in kept)
