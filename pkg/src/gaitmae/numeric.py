"""Numerical building blocks for the encoder.

Tensors and reverse-mode differentiation come from torch; the kernels the
encoder is assembled from (chunked attention, rotary embedding, layer norm,
the AdamW update and the warmup-cosine schedule) are written out here so
their exact arithmetic is pinned down and testable.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np
import torch

Tensor = torch.Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def backward(loss: Tensor, inputs: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    """Gradients of a scalar loss with respect to named leaf tensors.

    Inputs the loss does not depend on get a zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(inputs)
    grads = torch.autograd.grad(loss.reshape(()), [inputs[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(inputs[n]) if g is None else g) for n, g in zip(names, grads)}


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d))`` (full matrix; for inspection)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    scores = scores - scores.amax(dim=-1, keepdim=True)
    w = torch.exp(scores)
    return w / w.sum(dim=-1, keepdim=True)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, chunk: Optional[int] = None) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two dims.

    Queries are processed ``chunk`` rows at a time, and keys/values are
    streamed in blocks of the same size with a running max and normalizer,
    so peak memory is ``O(chunk^2)`` per head instead of ``O(n^2)``. With
    ``chunk=None`` (or ``chunk >= n``) this is a single block.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key head dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value lengths differ: {k.shape[-2]} vs {v.shape[-2]}")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ValueError("batch dims of q, k, v must match")
    n_q, n_k = q.shape[-2], k.shape[-2]
    if chunk is None:
        chunk = max(n_q, n_k)
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    scale = 1.0 / math.sqrt(q.shape[-1])
    outputs = []
    for qs in range(0, n_q, chunk):
        qc = q[..., qs:qs + chunk, :] * scale
        running_max = None
        for ks in range(0, n_k, chunk):
            s = qc @ k[..., ks:ks + chunk, :].transpose(-1, -2)
            block_max = s.amax(dim=-1, keepdim=True)
            if running_max is None:
                new_max = block_max
                p = torch.exp(s - new_max)
                denom = p.sum(dim=-1, keepdim=True)
                acc = p @ v[..., ks:ks + chunk, :]
            else:
                new_max = torch.maximum(running_max, block_max)
                rescale = torch.exp(running_max - new_max)
                p = torch.exp(s - new_max)
                denom = denom * rescale + p.sum(dim=-1, keepdim=True)
                acc = acc * rescale + p @ v[..., ks:ks + chunk, :]
            running_max = new_max
        outputs.append(acc / denom)
    return outputs[0] if len(outputs) == 1 else torch.cat(outputs, dim=-2)


def rope_frequencies(dim: int, base: float = 10000.0, dtype=torch.float64) -> Tensor:
    if dim % 2:
        raise ValueError(f"rotary embedding needs an even dimension, got {dim}")
    return base ** (-torch.arange(0, dim, 2, dtype=dtype) / dim)


def rope_rotate(x: Tensor, positions: Optional[Tensor] = None, base: float = 10000.0) -> Tensor:
    """Rotate each pair ``(2i, 2i+1)`` of the last dim by ``pos * base**(-2i/d)``.

    ``x`` is ``(..., positions, dims)``; positions default to ``0..n-1``.
    """
    n, d = x.shape[-2], x.shape[-1]
    freqs = rope_frequencies(d, base, dtype=torch.float64)
    if positions is None:
        positions = torch.arange(n, dtype=torch.float64)
    angles = positions.to(torch.float64)[:, None] * freqs[None, :]
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    rot_even = x_even * cos - x_odd * sin
    rot_odd = x_even * sin + x_odd * cos
    return torch.stack([rot_even, rot_odd], dim=-1).flatten(-2)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: OptimizerState,
    lr: Optional[float] = None,
) -> OptimizerState:
    """One AdamW update, in place on ``params``; decay is decoupled from the moments."""
    lr = state.lr if lr is None else lr
    bad = [n for n, g in grads.items() if not torch.isfinite(g).all()]
    if bad:
        details = ", ".join(f"{n} ({int((~torch.isfinite(grads[n])).sum())} non-finite)" for n in bad)
        raise NonFiniteGradient(f"non-finite gradient at step {state.t + 1}: {details}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        update = (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
        p.sub_(lr * update + lr * state.weight_decay * p)
    return state


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Linear warmup to ``lr_max`` then cosine annealing to ``lr_min`` at ``total_steps``."""
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr_max
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def warmup_steps_for(steps_per_epoch: int, warmup_epochs: float = 0.3) -> int:
    return int(round(warmup_epochs * steps_per_epoch))


# -- checkpoint format ------------------------------------------------------

CKPT_MAGIC = b"GMW1"
CKPT_VERSION = 1
PathLike = Union[str, Path]


def _pack_str(buf, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _unpack(buf, fmt: str):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise ValueError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _unpack_str(buf) -> str:
    (n,) = _unpack(buf, "<I")
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint")
    return raw.decode("utf-8")


def _pack_array(buf, t: Tensor) -> None:
    buf.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())


def _unpack_array(buf, shape: Tuple[int, ...]) -> Tensor:
    count = int(np.prod(shape, dtype=np.int64))
    raw = buf.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("truncated checkpoint")
    return torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())


def encode_checkpoint(params: Mapping[str, Tensor], meta: Mapping, state: Optional[OptimizerState] = None) -> bytes:
    """Serialize parameters (f32), JSON metadata and optional optimizer state."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    _pack_str(buf, json.dumps(meta, sort_keys=True))
    names = list(params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = params[name]
        _pack_str(buf, name)
        buf.write(struct.pack("<B", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        _pack_array(buf, t)
    buf.write(struct.pack("<B", 0 if state is None else 1))
    if state is not None:
        buf.write(struct.pack("<Q", state.t))
        buf.write(struct.pack("<5d", state.lr, state.beta1, state.beta2, state.eps, state.weight_decay))
        for name in names:
            present = name in state.m
            buf.write(struct.pack("<B", int(present)))
            if present:
                _pack_array(buf, state.m[name])
                _pack_array(buf, state.v[name])
    return buf.getvalue()


def decode_checkpoint(raw: bytes) -> Tuple[Dict[str, Tensor], dict, Optional[OptimizerState]]:
    buf = io.BytesIO(raw)
    if buf.read(4) != CKPT_MAGIC:
        raise ValueError("not a GMW1 checkpoint")
    (version,) = _unpack(buf, "<H")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(_unpack_str(buf))
    (count,) = _unpack(buf, "<I")
    params: Dict[str, Tensor] = {}
    for _ in range(count):
        name = _unpack_str(buf)
        (ndim,) = _unpack(buf, "<B")
        shape = _unpack(buf, f"<{ndim}I") if ndim else ()
        params[name] = _unpack_array(buf, tuple(shape))
    (has_state,) = _unpack(buf, "<B")
    state = None
    if has_state:
        (t,) = _unpack(buf, "<Q")
        lr, b1, b2, eps, wd = _unpack(buf, "<5d")
        state = OptimizerState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd, t=t)
        for name, p in params.items():
            (present,) = _unpack(buf, "<B")
            if present:
                state.m[name] = _unpack_array(buf, tuple(p.shape))
                state.v[name] = _unpack_array(buf, tuple(p.shape))
    if buf.read(1):
        raise ValueError("trailing bytes in checkpoint")
    return params, meta, state


def save_checkpoint(path: PathLike, params: Mapping[str, Tensor], meta: Mapping, state: Optional[OptimizerState] = None) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    raw = encode_checkpoint(params, meta, state)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Tensor], dict, Optional[OptimizerState]]:
    return decode_checkpoint(Path(path).read_bytes())


def file_hash(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
