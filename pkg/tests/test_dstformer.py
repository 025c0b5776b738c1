import itertools

import numpy as np
import pytest
import torch

from gaitmae.dstformer import (
    DSTformer,
    EncoderConfig,
    MaskPlan,
    apply_mask,
    count_parameters,
    expected_mask_ratio,
    optimal_frame_scale,
    reconstruction_loss,
    sample_mask,
)
from gaitmae.pretrain import EncoderState
from gaitmae.skeleton import MASKING_GROUP_ORDER, TAXONOMY

D = torch.float64


def small(blocks=2, dim=16, heads=2, **kw):
    torch.manual_seed(0)
    return DSTformer(EncoderConfig(blocks=blocks, dim=dim, heads=heads, **kw)).to(D).eval()


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(dim=12, heads=4)  # odd per-head width
    with pytest.raises(ValueError):
        EncoderConfig(activation="tanh")
    cfg = EncoderConfig(blocks=3, dim=32, heads=4)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_default_model_size():
    model = DSTformer(EncoderConfig())
    n = count_parameters(model)
    assert 3_000_000 < n < 3_500_000


def test_mask_ratio_closed_form():
    assert expected_mask_ratio() == pytest.approx(2 / 3 + (1 / 3) * 0.05, abs=1e-12)


def test_mask_spans_union_four_groups():
    plan = sample_mask(100, rng_seed=3, frame_mask_prob=0.0)
    groups = [set(TAXONOMY.masking_groups[g]) for g in MASKING_GROUP_ORDER]
    unions = {frozenset().union(*c) for c in itertools.combinations(groups, 4)}
    for start in range(0, 100, 16):
        rows = plan.masked[start:start + 16]
        assert (rows == rows[0]).all()
        assert frozenset(np.flatnonzero(rows[0])) in unions
        assert 14 <= rows[0].sum() <= 18
    assert plan.masked.shape == (100, 26)


def test_mask_deterministic_and_frame_masking():
    a = sample_mask(900, rng_seed=11)
    b = sample_mask(900, rng_seed=11)
    assert np.array_equal(a.masked, b.masked)
    frames = a.masked.all(axis=1)
    assert 0 < frames.sum() < 120
    ratios = [sample_mask(900, rng_seed=s).ratio for s in range(300)]
    assert 0.66 <= np.mean(ratios) <= 0.71


def test_apply_mask():
    x = np.random.default_rng(0).normal(size=(20, 26, 4))
    assert np.array_equal(apply_mask(x, MaskPlan.empty(20)), x)
    assert not apply_mask(x, MaskPlan.full(20)).any()
    plan = sample_mask(20, rng_seed=2)
    out = apply_mask(x, plan)
    assert np.array_equal((out == 0).all(axis=-1), plan.masked)
    t = apply_mask(torch.tensor(x), plan)
    assert np.array_equal(t.numpy(), out)
    with pytest.raises(ValueError):
        apply_mask(x, MaskPlan.empty(19))


def test_fusion_weights_sum_to_one():
    model = small(fusion="adaptive")
    model.encode(torch.randn(16, 26, 4, dtype=D))
    for alpha in model.fusion_weights():
        assert (alpha.sum(-1) - 1).abs().max() < 1e-6
        assert alpha.shape[-1] == 2


def test_static_fusion_variant():
    model = small(fusion="static")
    model.encode(torch.randn(16, 26, 4, dtype=D))
    assert all(torch.allclose(a, torch.full_like(a, 0.5)) for a in model.fusion_weights())


def test_batch_permutation():
    model = small()
    x = torch.randn(3, 16, 26, 4, dtype=D)
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        assert torch.allclose(model(x)[perm], model(x[perm]), atol=1e-12)


def test_rotary_shift_probe():
    torch.manual_seed(0)
    model = DSTformer(EncoderConfig(blocks=2, dim=32, heads=4)).eval()
    x = torch.randn(32, 26, 4)
    with torch.no_grad():
        a, b = model.encode(x), model.encode(x, frame_offset=16)
    noise = torch.finfo(torch.float32).eps * float(a.abs().max())
    assert float((a.mean((0, 1)) - b.mean((0, 1))).abs().max()) < 10 * noise


@pytest.mark.parametrize("frames", [16, 23, 40])
def test_shape_contract(frames):
    model = small()
    with torch.no_grad():
        out = model(torch.randn(frames, 26, 4, dtype=D))
        assert out.shape == (frames, 26, 3)
        assert torch.isfinite(out).all()
        assert model.prelogits(model.encode(torch.randn(frames, 26, 4, dtype=D))).shape == (frames, 26, 32)
    with pytest.raises(ValueError):
        model(torch.randn(frames, 25, 4, dtype=D))


def test_chunked_backend_matches_fused():
    fused = small()
    chunked = small(attn_chunk=5)
    chunked.load_state_dict(fused.state_dict())
    x = torch.randn(18, 26, 4, dtype=D)
    with torch.no_grad():
        assert (fused(x) - chunked(x)).abs().max() < 1e-10


def test_zero_decoder_gives_zero_output():
    model = small()
    with torch.no_grad():
        for layer in (model.dec1, model.dec2, model.dec3):
            layer.weight.zero_()
            layer.bias.zero_()
        assert torch.equal(model.decode(torch.randn(5, 26, 16, dtype=D) * 100), torch.zeros(5, 26, 3, dtype=D))


def test_non_finite_activations_rejected():
    model = small()
    with torch.no_grad():
        model.blocks[1].mlp.fc2.bias.fill_(float("inf"))
    with pytest.raises(FloatingPointError, match="block 1"):
        model.encode(torch.randn(16, 26, 4, dtype=D))


def test_loss_identities():
    g = torch.Generator().manual_seed(0)
    target = torch.randn(10, 26, 3, dtype=D, generator=g)
    zero = reconstruction_loss(target.clone(), target)
    assert all(v == 0 for v in zero.as_floats().values())
    off = reconstruction_loss(target + torch.tensor([0.003, 0.0, 0.004], dtype=D), target)
    assert abs(float(off.mpjpe) - 0.005) < 1e-9
    assert abs(float(off.velocity)) < 1e-12
    double = reconstruction_loss(2 * target, target)
    assert abs(float(double.nmpjpe)) < 1e-9 and float(double.mpjpe) > 0
    pred = torch.randn(10, 26, 3, dtype=D, generator=g)
    l = reconstruction_loss(pred, target, lambda1=0.1, lambda2=0.1)
    assert abs(float(l.total) - float(l.mpjpe + 0.1 * l.nmpjpe + 0.1 * l.velocity)) < 1e-9
    l2 = reconstruction_loss(pred, target, lambda1=0.1, lambda2=0.2)
    assert float(l2.total - l2.mpjpe - 0.1 * l2.nmpjpe) == pytest.approx(2 * float(l.total - l.mpjpe - 0.1 * l.nmpjpe), rel=1e-12)


def test_nmpjpe_zero_frame_scale_is_one():
    pred = torch.zeros(2, 26, 3, dtype=D)
    pred[1] = 1.0
    target = torch.ones(2, 26, 3, dtype=D)
    s = optimal_frame_scale(pred, target)
    assert s[0].item() == 1.0 and s[1].item() == 1.0


def test_masked_only_loss():
    target = torch.zeros(4, 26, 3, dtype=D)
    pred = torch.zeros(4, 26, 3, dtype=D)
    plan = MaskPlan.empty(4)
    plan.masked[2, 5] = True
    pred[2, 5] = torch.tensor([3.0, 4.0, 0.0], dtype=D)
    pred[0, 0] = 100.0  # visible error ignored
    l = reconstruction_loss(pred, target, plan, masked_only=True)
    assert float(l.mpjpe) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        reconstruction_loss(pred, target, None, masked_only=True)
    with pytest.raises(ValueError):
        reconstruction_loss(pred, target[:3])


def test_loss_gradient_finite_at_perfect_prediction():
    target = torch.randn(4, 26, 3, dtype=D)
    pred = target.clone().requires_grad_(True)
    reconstruction_loss(pred, target).total.backward()
    assert torch.isfinite(pred.grad).all()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    torch.manual_seed(1)
    model = DSTformer(EncoderConfig(blocks=2, dim=16, heads=2))
    state = EncoderState(model, step=7, meta={"note": "x"})
    digest = state.save(tmp_path / "m.gmw")
    back = EncoderState.load(tmp_path / "m.gmw")
    assert back.step == 7 and back.meta["note"] == "x" and len(digest) == 64
    x = torch.randn(20, 26, 4)
    with torch.no_grad():
        assert torch.equal(model.eval()(x), back.model.eval()(x))
