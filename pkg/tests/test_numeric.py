import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gaitmae.numeric import (
    NonFiniteGradient,
    OptimizerState,
    adamw_step,
    attention_weights,
    backward,
    decode_checkpoint,
    encode_checkpoint,
    gelu,
    layer_norm,
    load_checkpoint,
    lr_schedule,
    rope_rotate,
    save_checkpoint,
    softmax_attention,
    warmup_steps_for,
)

D = torch.float64


def central_difference(fn, x, h=1e-5):
    """Numerical gradient of a scalar function of one tensor, element by element."""
    grad = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        plus = fn(flat.reshape(x.shape)).item()
        flat[i] = orig - h
        minus = fn(flat.reshape(x.shape)).item()
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * h)
    return grad


def analytic(fn, x):
    leaf = x.detach().clone().requires_grad_(True)
    return backward(fn(leaf), {"x": leaf})["x"]


def rel_err(a, b):
    return float((a - b).abs().max() / max(1e-8, float(b.abs().max())))


_g = torch.Generator().manual_seed(0)
W = torch.randn(5, 4, dtype=D, generator=_g)
IDX = torch.tensor([[2, 0, 1, 3], [1, 1, 0, 2], [3, 2, 2, 0]])

PRIMITIVES = {
    "matmul": lambda x: (x @ W).sum(),
    "add": lambda x: ((x + W.T[:3]) ** 2).sum(),
    "mul": lambda x: (x * x.flip(0)).sum(),
    "softmax": lambda x: (torch.softmax(x, -1) * torch.arange(5, dtype=D)).sum(),
    "layernorm": lambda x: (layer_norm(x) * torch.arange(5, dtype=D)).sum(),
    "tanh": lambda x: torch.tanh(x).pow(2).sum(),
    "gelu": lambda x: (gelu(x) * x.cos()).sum(),
    "relu": lambda x: (torch.relu(x) * torch.arange(15, dtype=D).reshape(3, 5)).sum(),
    "reshape_transpose": lambda x: (x.reshape(5, 3).T * torch.arange(15, dtype=D).reshape(3, 5)).sum(),
    "slice": lambda x: (x[1:, ::2] ** 3).sum(),
    "concatenate": lambda x: (torch.cat([x, 2 * x], 0) ** 2).mean(),
    "mean": lambda x: x.mean(-1).pow(2).sum(),
    "max": lambda x: x.amax(-1).sum(),
    "power": lambda x: (x.abs() + 1).pow(1.5).sum(),
    "gather": lambda x: (torch.gather(x, 1, IDX) ** 2).sum(),
    "attention": lambda x: softmax_attention(x[None], x[None] * 0.5, x[None] ** 2, chunk=2).sum(),
    "rope": lambda x: (rope_rotate(x[:, :4]) * torch.arange(12, dtype=D).reshape(3, 4)).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    x = torch.randn(3, 5, dtype=D, generator=torch.Generator().manual_seed(1))
    fn = PRIMITIVES[name]
    assert rel_err(analytic(fn, x), central_difference(fn, x)) < 1e-4


def test_backward_basics():
    x = torch.tensor(3.0, dtype=D, requires_grad=True)
    assert backward(x * x, {"x": x})["x"].item() == 6.0
    c = torch.tensor(2.0, dtype=D, requires_grad=True)
    assert backward(c * 0 + 5.0, {"c": c})["c"].item() == 0.0
    y = torch.ones(3, dtype=D, requires_grad=True)
    unused = torch.ones(2, dtype=D, requires_grad=True)
    assert torch.equal(backward(y.sum(), {"u": unused})["u"], torch.zeros(2, dtype=D))
    with pytest.raises(ValueError):
        backward(y * 2, {"y": y})


def naive_attention(q, k, v):
    s = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(s, -1) @ v


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2 ** 31 - 1))
def test_chunked_attention_matches_naive(n, chunk, seed):
    g = torch.Generator().manual_seed(seed)
    q, k, v = (torch.randn(2, n, 6, dtype=D, generator=g) * 3 for _ in range(3))
    ref = naive_attention(q, k, v)
    assert (softmax_attention(q, k, v, chunk) - ref).abs().max() < 1e-10


def test_attention_uniform_and_stochastic():
    g = torch.Generator().manual_seed(3)
    q = torch.randn(7, 4, dtype=D, generator=g)
    k = torch.randn(1, 4, dtype=D, generator=g).expand(9, 4)
    v = torch.randn(9, 5, dtype=D, generator=g)
    out = softmax_attention(q, k, v, chunk=4)
    assert torch.allclose(out, v.mean(0).expand(7, 5), atol=1e-12)
    w = attention_weights(q, torch.randn(9, 4, dtype=D, generator=g))
    assert (w.sum(-1) - 1).abs().max() < 1e-12
    with pytest.raises(ValueError):
        softmax_attention(q, torch.randn(9, 3, dtype=D), v)
    with pytest.raises(ValueError):
        softmax_attention(q, k, v, chunk=0)


def test_attention_large_logits_stable():
    q = torch.full((3, 2), 400.0, dtype=D)
    k = torch.tensor([[1.0, 1.0], [-1.0, -1.0], [0.5, 0.5]], dtype=D)
    v = torch.eye(3, dtype=D)
    out = softmax_attention(q, k, v, chunk=1)
    assert torch.isfinite(out).all()
    assert torch.allclose(out, naive_attention(q, k, v), atol=1e-12)


def test_rope_properties():
    g = torch.Generator().manual_seed(4)
    x = torch.randn(10, 8, dtype=D, generator=g)
    r = rope_rotate(x)
    assert torch.equal(r[0], x[0])
    pair_norm = lambda t: t.reshape(10, 4, 2).norm(dim=-1)
    assert (pair_norm(r) - pair_norm(x)).abs().max() < 1e-12
    q, k = torch.randn(8, dtype=D, generator=g), torch.randn(8, dtype=D, generator=g)

    def inner(p1, p2):
        rq = rope_rotate(q[None], torch.tensor([p1], dtype=D))[0]
        rk = rope_rotate(k[None], torch.tensor([p2], dtype=D))[0]
        return float(rq @ rk)

    assert abs(inner(3, 11) - inner(10, 18)) < 1e-10
    angle = 5 * 10000.0 ** (-2 * 1 / 8)
    expected = torch.tensor([math.cos(angle), math.sin(angle)], dtype=D)
    e = torch.zeros(1, 8, dtype=D)
    e[0, 2] = 1.0
    assert torch.allclose(rope_rotate(e, torch.tensor([5.0], dtype=D))[0, 2:4], expected, atol=1e-15)
    with pytest.raises(ValueError):
        rope_rotate(torch.zeros(3, 5, dtype=D))


def test_layer_norm_statistics():
    x = torch.randn(6, 32, dtype=D, generator=torch.Generator().manual_seed(5)) * 7 + 3
    y = layer_norm(x)
    assert y.mean(-1).abs().max() < 1e-6
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-6
    ref = torch.nn.functional.layer_norm(x, (32,))
    assert torch.allclose(y, ref, atol=1e-12)


def test_adamw_zero_gradient():
    p = {"w": torch.tensor([1.0, -2.0], dtype=D)}
    adamw_step(p, {"w": torch.zeros(2, dtype=D)}, OptimizerState(weight_decay=0.0), lr=0.1)
    assert torch.equal(p["w"], torch.tensor([1.0, -2.0], dtype=D))
    adamw_step(p, {"w": torch.zeros(2, dtype=D)}, OptimizerState(weight_decay=0.01), lr=0.1)
    assert torch.allclose(p["w"], 0.999 * torch.tensor([1.0, -2.0], dtype=D), atol=1e-15)


def test_adamw_first_step_closed_form():
    p = {"w": torch.tensor([0.5], dtype=D)}
    adamw_step(p, {"w": torch.ones(1, dtype=D)}, OptimizerState(weight_decay=0.0), lr=0.01)
    assert abs(p["w"].item() - (0.5 - 0.01)) < 1e-9


def test_adamw_matches_formula_over_steps():
    rng = np.random.default_rng(6)
    theta = rng.normal(size=4)
    p = {"w": torch.tensor(theta, dtype=D)}
    st_ = OptimizerState(lr=0.05, weight_decay=0.01)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        lr = 0.05 / t
        adamw_step(p, {"w": torch.tensor(g, dtype=D)}, st_, lr)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat, vhat = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + 1e-8) - lr * 0.01 * theta
    assert np.allclose(p["w"].numpy(), theta, atol=1e-12)
    assert st_.t == 5


def test_adamw_rejects_bad_gradients():
    p = {"w": torch.zeros(2, dtype=D)}
    with pytest.raises(NonFiniteGradient, match="w"):
        adamw_step(p, {"w": torch.tensor([1.0, float("nan")], dtype=D)}, OptimizerState())
    with pytest.raises(ValueError):
        adamw_step(p, {"w": torch.zeros(3, dtype=D)}, OptimizerState())


def test_lr_schedule():
    assert lr_schedule(10, 100, 10, 1e-3, 1e-5) == 1e-3
    assert lr_schedule(100, 100, 10, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert lr_schedule(55, 100, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-15)
    assert lr_schedule(5, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_schedule(0, 100, 0, 1e-3) == 1e-3
    assert warmup_steps_for(100) == 30
    values = [lr_schedule(s, 100, 10, 1.0) for s in range(10, 101)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_checkpoint_round_trip(tmp_path):
    g = torch.Generator().manual_seed(7)
    params = {"a.weight": torch.randn(3, 4, generator=g), "b": torch.randn(5, generator=g), "s": torch.tensor(2.5)}
    state = OptimizerState(lr=0.1, t=3)
    state.m = {"a.weight": torch.randn(3, 4, generator=g)}
    state.v = {"a.weight": torch.rand(3, 4, generator=g)}
    path = tmp_path / "c.gmw"
    digest = save_checkpoint(path, params, {"k": [1, 2]}, state)
    assert len(digest) == 64 and path.read_bytes()[:4] == b"GMW1"
    back, meta, st2 = load_checkpoint(path)
    assert meta == {"k": [1, 2]}
    for k in params:
        assert torch.equal(back[k], params[k])
    assert st2.t == 3 and st2.lr == 0.1 and torch.equal(st2.m["a.weight"], state.m["a.weight"])
    assert "b" not in st2.m
    assert encode_checkpoint(back, meta, st2) == path.read_bytes()
    raw = path.read_bytes()
    with pytest.raises(ValueError):
        decode_checkpoint(raw[:-3])
    with pytest.raises(ValueError):
        decode_checkpoint(raw + b"x")
    with pytest.raises(ValueError):
        decode_checkpoint(b"NOPE" + raw[4:])
