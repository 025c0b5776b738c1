import numpy as np
import pytest

from gaitmae.features import cadence
from gaitmae.skeleton import Activity, JOINT_INDEX, preprocess
from gaitmae.synthetic import (
    PARAM_NAMES,
    VISIT_PERTURBATION,
    WalkerParams,
    generate_dataset,
    generate_walk,
    target_columns,
    target_family,
)


def test_ankle_frequency_matches_cadence():
    seq = generate_walk(WalkerParams(cadence=100.0), frames=900, fps=30.0, rng_seed=1)
    y = seq.data[:, JOINT_INDEX["ANKLE_LEFT"], 1]
    y = y - y.mean()
    power = np.abs(np.fft.rfft(y)) ** 2
    freqs = np.fft.rfftfreq(len(y), 1 / 30.0)
    # a leg lifts once per stride (two steps); left+right together beat at the step rate
    both = seq.data[:, JOINT_INDEX["ANKLE_LEFT"], 1] + seq.data[:, JOINT_INDEX["ANKLE_RIGHT"], 1]
    pb = np.abs(np.fft.rfft(both - both.mean())) ** 2
    assert abs(freqs[np.argmax(pb[1:]) + 1] - 100 / 60) < 0.05
    assert abs(freqs[np.argmax(power[1:]) + 1] - 100 / 120) < 0.05


def test_determinism_and_disabled_arm():
    p = WalkerParams(noise_std=0.0, arm_swing_amp=0.0)
    a = generate_walk(p, 120, rng_seed=5)
    b = generate_walk(p, 120, rng_seed=5)
    assert np.array_equal(a.data, b.data)
    for side in ("LEFT", "RIGHT"):
        assert a.data[:, JOINT_INDEX[f"WRIST_{side}"], 0].var() < 1e-8


def test_params_validated():
    with pytest.raises(ValueError):
        WalkerParams(cadence=130.0)
    with pytest.raises(ValueError):
        WalkerParams(noise_std=0.05)
    with pytest.raises(ValueError):
        WalkerParams(trait_vector=(2.0,))
    with pytest.raises(ValueError):
        generate_walk(WalkerParams(), frames=1)


def test_normalized_walk_satisfies_invariants():
    seq = preprocess(generate_walk(WalkerParams(noise_std=0.01), 300, rng_seed=2), target=300)
    assert np.allclose(np.linalg.norm(seq.data[..., :3], axis=2).max(axis=1), 1, atol=1e-6)


def test_dataset_shape_and_visit_stability():
    ds = generate_dataset(50, 2, rng_seed=4, frames=32)
    assert len(ds.targets) == 100
    assert len({(s.subject_id, s.visit_id) for s in ds.sequences}) == 100
    assert ds.target_columns == target_columns()
    for s in range(50):
        a = ds.params[(f"S{s:04d}", "v0")].unit()
        b = ds.params[(f"S{s:04d}", "v1")].unit()
        assert np.max(np.abs(a - b)) <= 2 * VISIT_PERTURBATION + 1e-12
    row = ds.targets[("S0000", "v0")]
    assert set(row) == set(target_columns())
    assert row["nuisance"] == ds.targets[("S0000", "v1")]["nuisance"]


def test_subject_identifiability():
    ds = generate_dataset(40, 2, rng_seed=8, frames=8)
    rng = np.random.default_rng(0)
    units = {k: p.unit() for k, p in ds.params.items()}
    wins = 0
    trials = 500
    for _ in range(trials):
        s, t = rng.choice(40, size=2, replace=False)
        within = np.linalg.norm(units[(f"S{s:04d}", "v0")] - units[(f"S{s:04d}", "v1")])
        across = np.linalg.norm(units[(f"S{s:04d}", "v0")] - units[(f"S{t:04d}", "v1")])
        wins += within < across
    assert wins / trials >= 0.95


def test_condition_prevalence():
    ds = generate_dataset(2000, 1, rng_seed=9, frames=2, condition_prevalence=0.1)
    prev = np.mean([r["condition_proxy"] for r in ds.targets.values()])
    assert abs(prev - 0.1) < 0.05


def test_multiple_activities_and_families():
    ds = generate_dataset(3, 1, activities=[Activity.TreadmillFixed, Activity.Romberg], frames=16)
    assert len(ds.sequences) == 6
    assert target_family("cadence") == "gait"
    assert target_family("trait_6") == "latent"
    assert target_family("nuisance") == "covariate"
    assert set(PARAM_NAMES) <= set(ds.target_columns)


@pytest.mark.parametrize("cad", [90.0, 100.0, 110.0])
def test_cadence_recoverable(cad):
    seq = generate_walk(WalkerParams(cadence=cad, noise_std=0.01), 900, rng_seed=3)
    assert abs(cadence(seq) - cad) <= 3
