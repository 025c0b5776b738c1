import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_seq
from gaitmae.skeleton import (
    ATTRIBUTION_GROUP_ORDER,
    JOINT_NAMES,
    MASKING_GROUP_ORDER,
    N_JOINTS,
    PELVIS,
    SOURCE_JOINT_NAMES,
    SPINE_NAVEL,
    TAXONOMY,
    drop_low_confidence_joints,
    gaussian_jitter,
    median_filter,
    normalize_frames,
    preprocess,
    split_windows,
    window_to_length,
)


def test_taxonomy_partitions():
    assert len(JOINT_NAMES) == 26
    sizes = {g: len(TAXONOMY.masking_groups[g]) for g in MASKING_GROUP_ORDER}
    assert sizes == {"LeftLeg": 4, "RightLeg": 4, "LeftArm": 4, "RightArm": 4, "Torso": 4, "Head": 6}
    attr = TAXONOMY.attribution_groups
    assert list(attr["Head"]) == list(range(20, 26))
    assert list(attr["Torso"]) == list(range(0, 4))
    assert list(attr["Arms"]) == list(range(4, 12))
    assert list(attr["Legs"]) == list(range(12, 20))
    assert tuple(ATTRIBUTION_GROUP_ORDER) == ("Head", "Torso", "Arms", "Legs")
    for groups in (TAXONOMY.masking_groups, TAXONOMY.attribution_groups):
        assert sorted(j for g in groups.values() for j in g) == list(range(N_JOINTS))
    assert [JOINT_NAMES[j] for j in TAXONOMY.masking_groups["LeftLeg"]] == ["HIP_LEFT", "KNEE_LEFT", "ANKLE_LEFT", "FOOT_LEFT"]


def test_median_filter_hand_example():
    data = np.zeros((5, 26, 3))
    data[:, 0, 0] = [0, 10, 0, 10, 0]
    out = median_filter(make_seq(data), 3)
    assert out.data[:, 0, 0].tolist() == [0, 0, 10, 0, 0]


def test_median_filter_trivial_cases(random_seq):
    assert np.array_equal(median_filter(random_seq, 1).data, random_seq.data)
    const = make_seq(np.full((9, 26, 3), 2.5))
    assert np.array_equal(median_filter(const, 5).data, const.data)
    conf = random_seq.data.copy()
    conf[..., 3] = np.linspace(0, 1, conf.shape[0])[:, None]
    seq = random_seq.with_data(conf)
    assert np.array_equal(median_filter(seq, 3).data[..., 3], conf[..., 3])


def test_median_filter_rejects():
    seq = make_seq(np.zeros((4, 26, 3)))
    with pytest.raises(ValueError):
        median_filter(seq, 5)
    with pytest.raises(ValueError):
        median_filter(seq, 2)


def test_normalize_hand_example():
    data = np.zeros((1, 26, 3))
    data[0, :, :] = (1, 1, 1)
    data[0, 1] = (1, 1, 3)
    out, flagged = normalize_frames(make_seq(data))
    assert flagged == []
    assert np.allclose(out.data[0, PELVIS, :3], 0)
    assert np.allclose(out.data[0, 1, :3], (0, 0, 1))


def test_normalize_degenerate_frame():
    data = np.zeros((3, 26, 3))
    data[1] = np.random.default_rng(0).normal(size=(26, 3))
    out, flagged = normalize_frames(make_seq(data))
    assert flagged == [0, 2]
    assert np.array_equal(out.data[0], make_seq(data).data[0])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 26, 3), elements=st.floats(-5, 5)))
def test_normalize_invariants_and_idempotence(xyz):
    seq = make_seq(xyz)
    out, flagged = normalize_frames(seq)
    norms = np.linalg.norm(out.data[..., :3], axis=2).max(axis=1)
    for f in range(6):
        if f in flagged:
            continue
        assert abs(norms[f] - 1) < 1e-6
        assert np.allclose(out.data[f, PELVIS, :3], 0, atol=1e-6)
    again, _ = normalize_frames(out)
    assert np.max(np.abs(again.data - out.data)) <= 1e-6
    assert np.array_equal(out.data[..., 3], seq.data[..., 3])


def test_normalize_two_joint_centroid(random_seq):
    out, _ = normalize_frames(random_seq, (PELVIS, SPINE_NAVEL))
    centroid = out.data[:, [PELVIS, SPINE_NAVEL], :3].mean(axis=1)
    assert np.allclose(centroid, 0, atol=1e-12)


def test_pure_of_metadata(random_seq):
    other = make_seq(random_seq.data, subject="X", visit="Y")
    assert np.array_equal(median_filter(random_seq).data, median_filter(other).data)
    assert np.array_equal(normalize_frames(random_seq)[0].data, normalize_frames(other)[0].data)


def test_window_to_length():
    rng = np.random.default_rng(1)
    long = make_seq(rng.normal(size=(1000, 26, 3)))
    assert np.array_equal(window_to_length(long).data, long.data[:900])
    exact = make_seq(rng.normal(size=(900, 26, 3)))
    assert np.array_equal(window_to_length(exact).data, exact.data)
    short = make_seq(rng.normal(size=(10, 26, 3)))
    out = window_to_length(short)
    assert out.n_frames == 900
    assert np.array_equal(out.data[:10], short.data)
    assert np.array_equal(out.data[10:, :, :3], np.broadcast_to(short.data[9, :, :3], (890, 26, 3)))
    assert np.all(out.data[10:, :, 3] == 0)
    with pytest.raises(ValueError):
        window_to_length(make_seq(np.zeros((0, 26, 3))))


def test_split_windows():
    seq = make_seq(np.arange(2500 * 26 * 3, dtype=float).reshape(2500, 26, 3))
    wins = split_windows(seq, 900, max_windows=3)
    assert [w.sequence_index for w in wins] == [0, 1]
    assert np.array_equal(wins[1].data, seq.data[900:1800])


def test_gaussian_jitter():
    const = make_seq(np.zeros((1000, 26, 3)) + 0.3)
    assert np.array_equal(gaussian_jitter(const, 0.0, 3).data, const.data)
    a = gaussian_jitter(const, 0.05, 7)
    b = gaussian_jitter(const, 0.05, 7)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.data[..., 3], const.data[..., 3])
    big = make_seq(np.zeros((12821, 26, 3)))
    noise = (gaussian_jitter(big, 0.05, 11).data[..., :3]).ravel()[:1_000_000]
    assert abs(noise.std() - 0.05) < 0.001
    with pytest.raises(ValueError):
        gaussian_jitter(const, -0.1, 0)


def test_drop_low_confidence_joints():
    rng = np.random.default_rng(2)
    raw = rng.uniform(size=(5, 32, 4))
    seq = drop_low_confidence_joints(raw)
    assert seq.data.shape == (5, 26, 4)
    kept = [i for i, n in enumerate(SOURCE_JOINT_NAMES) if n in JOINT_NAMES]
    assert np.array_equal(seq.data, raw[:, kept, :])
    assert [SOURCE_JOINT_NAMES[i] for i in kept] == list(JOINT_NAMES)
    with pytest.raises(ValueError):
        drop_low_confidence_joints(seq.data)


def test_preprocess_chain():
    rng = np.random.default_rng(3)
    seq = make_seq(rng.normal(size=(50, 26, 3)) + 5)
    out = preprocess(seq, target=64)
    assert out.n_frames == 64
    assert np.allclose(np.linalg.norm(out.data[..., :3], axis=2).max(axis=1), 1)
