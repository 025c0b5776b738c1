"""Dual-stream spatiotemporal transformer, composite masking and reconstruction loss."""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .numeric import rope_frequencies, softmax_attention
from .skeleton import MASKING_GROUP_ORDER, N_CHANNELS, N_JOINTS, TAXONOMY

Tensor = torch.Tensor


@dataclass
class EncoderConfig:
    blocks: int = 8
    dim: int = 128
    heads: int = 8
    joints: int = N_JOINTS
    frames: int = 900
    in_channels: int = N_CHANNELS
    mlp_ratio: float = 4.0
    decoder_hidden: Tuple[int, int] = (32, 32)
    activation: str = "gelu"
    fusion: str = "adaptive"
    rope_base: float = 10000.0
    attn_chunk: Optional[int] = None
    attn_backend: str = "fused"

    def __post_init__(self):
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2:
            raise ValueError("per-head dim must be even for rotary embedding")
        if len(self.decoder_hidden) != 2:
            raise ValueError("decoder has exactly two hidden layers")
        if self.activation not in ("gelu", "relu"):
            raise ValueError("activation must be 'gelu' or 'relu'")
        if self.fusion not in ("adaptive", "static"):
            raise ValueError("fusion must be 'adaptive' or 'static'")
        if self.attn_backend not in ("fused", "reference"):
            raise ValueError("attn_backend must be 'fused' or 'reference'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _linear(fan_in: int, fan_out: int) -> nn.Linear:
    layer = nn.Linear(fan_in, fan_out)
    nn.init.xavier_uniform_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, x.shape[-1:], self.weight, self.bias, 1e-5)


@functools.lru_cache(maxsize=32)
def _rope_table(n: int, dim: int, base: float, dtype: torch.dtype) -> Tuple[Tensor, Tensor]:
    angles = torch.arange(n, dtype=torch.float64)[:, None] * rope_frequencies(dim, base)[None, :]
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


def _rope_apply(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    # same rotation as numeric.rope_rotate, with the trig tables cached
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    return torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1).flatten(-2)


class Attention(nn.Module):
    """Multi-head self-attention over joints (spatial) or frames (temporal)."""

    def __init__(self, cfg: EncoderConfig, mode: str):
        super().__init__()
        if mode not in ("spatial", "temporal"):
            raise ValueError(mode)
        self.mode = mode
        self.heads = cfg.heads
        self.rope_base = cfg.rope_base
        self.chunk = cfg.attn_chunk
        self.fused = cfg.attn_backend == "fused" and cfg.attn_chunk is None
        self.qkv = _linear(cfg.dim, 3 * cfg.dim)
        self.proj = _linear(cfg.dim, cfg.dim)

    def forward(self, x: Tensor, frame_offset: int = 0) -> Tensor:
        b, f, j, d = x.shape
        h = self.heads
        if self.mode == "temporal":
            x = x.permute(0, 2, 1, 3)  # (b, j, f, d): attend across frames per joint
        n_batch, n_tok = x.shape[0] * x.shape[1], x.shape[2]
        qkv = self.qkv(x).reshape(n_batch, n_tok, 3, h, d // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if self.mode == "temporal":
            cos, sin = _rope_table(n_tok + frame_offset, d // h, self.rope_base, q.dtype)
            cos, sin = cos[frame_offset:], sin[frame_offset:]
            q = _rope_apply(q, cos, sin)
            k = _rope_apply(k, cos, sin)
        if self.fused:
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            out = softmax_attention(q, k, v, self.chunk)  # (n_batch, h, n_tok, d/h)
        out = out.transpose(1, 2).reshape(n_batch, n_tok, d)
        out = self.proj(out)
        if self.mode == "temporal":
            return out.reshape(b, j, f, d).permute(0, 2, 1, 3)
        return out.reshape(b, f, j, d)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, activation: str = "gelu"):
        super().__init__()
        self.fc1 = _linear(dim, hidden)
        self.fc2 = _linear(hidden, dim)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        x = self.fc1(x)
        x = F.gelu(x) if self.activation == "gelu" else torch.relu(x)
        return self.fc2(x)


class DSTBlock(nn.Module):
    """Spatial-then-temporal and temporal-then-spatial streams with learned fusion."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.dim
        self.norm_st_s = LayerNorm(d)
        self.attn_st_s = Attention(cfg, "spatial")
        self.norm_st_t = LayerNorm(d)
        self.attn_st_t = Attention(cfg, "temporal")
        self.norm_ts_t = LayerNorm(d)
        self.attn_ts_t = Attention(cfg, "temporal")
        self.norm_ts_s = LayerNorm(d)
        self.attn_ts_s = Attention(cfg, "spatial")
        self.fusion_mode = cfg.fusion
        if cfg.fusion == "adaptive":
            self.fusion = _linear(2 * d, 2)
        else:
            self.fusion_logits = nn.Parameter(torch.zeros(2))
        self.norm_mlp = LayerNorm(d)
        self.mlp = MLP(d, int(round(d * cfg.mlp_ratio)), cfg.activation)
        self.last_alpha: Optional[Tensor] = None

    def forward(self, x: Tensor, frame_offset: int = 0) -> Tensor:
        st = self.attn_st_t(self.norm_st_t(self.attn_st_s(self.norm_st_s(x))), frame_offset)
        ts = self.attn_ts_s(self.norm_ts_s(self.attn_ts_t(self.norm_ts_t(x), frame_offset)))
        if self.fusion_mode == "adaptive":
            alpha = torch.softmax(self.fusion(torch.cat([st, ts], dim=-1)), dim=-1)
        else:
            alpha = torch.softmax(self.fusion_logits, dim=-1).expand(*st.shape[:-1], 2)
        self.last_alpha = alpha.detach()
        x = x + alpha[..., :1] * st + alpha[..., 1:] * ts
        return x + self.mlp(self.norm_mlp(x))


class DSTformer(nn.Module):
    """Encoder ``(B, F, J, C) -> (B, F, J, D)`` plus the three-layer tanh decoder."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.joint_embed = _linear(cfg.in_channels, d)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.joints, d))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(DSTBlock(cfg) for _ in range(cfg.blocks))
        self.norm_out = LayerNorm(d)
        self.head = MLP(d, d, cfg.activation)
        h1, h2 = cfg.decoder_hidden
        self.dec1 = _linear(d, h1)
        self.dec2 = _linear(h1, h2)
        self.dec3 = _linear(h2, 3)
        # Vectorized finite-difference probes map over parameter sets and cannot branch on values.
        self.check_finite = True

    def encode(self, x: Tensor, frame_offset: int = 0) -> Tensor:
        """Latent ``(B, F, J, D)``; ``frame_offset`` shifts the rotary frame positions."""
        if x.dim() == 3:
            return self.encode(x.unsqueeze(0), frame_offset).squeeze(0)
        if x.shape[-2] != self.cfg.joints or x.shape[-1] != self.cfg.in_channels:
            raise ValueError(f"expected (..., {self.cfg.joints}, {self.cfg.in_channels}) input, got {tuple(x.shape)}")
        h = self.joint_embed(x) + self.pos_embed
        for i, block in enumerate(self.blocks):
            h = block(h, frame_offset)
            if self.check_finite and not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after block {i}")
        return self.head(self.norm_out(h))

    def prelogits(self, latent: Tensor) -> Tensor:
        """Decoder activations feeding the final coordinate layer."""
        return torch.tanh(self.dec2(torch.tanh(self.dec1(latent))))

    def decode(self, latent: Tensor) -> Tensor:
        return self.dec3(self.prelogits(latent))

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))

    def fusion_weights(self):
        return [b.last_alpha for b in self.blocks]


# -- masking -----------------------------------------------------------------

@dataclass
class MaskPlan:
    masked: np.ndarray  # (frames, joints) bool
    span_length: int = 16
    groups_per_span: int = 4
    frame_mask_prob: float = 0.05

    @property
    def ratio(self) -> float:
        return float(self.masked.mean())

    @classmethod
    def empty(cls, frames: int, joints: int = N_JOINTS) -> "MaskPlan":
        return cls(np.zeros((frames, joints), dtype=bool))

    @classmethod
    def full(cls, frames: int, joints: int = N_JOINTS) -> "MaskPlan":
        return cls(np.ones((frames, joints), dtype=bool))


def sample_mask(
    frames: int,
    joints: int = N_JOINTS,
    rng_seed: Union[int, Sequence[int], np.random.Generator] = 0,
    span_length: int = 16,
    groups_per_span: int = 4,
    frame_mask_prob: float = 0.05,
) -> MaskPlan:
    """Anatomical group masking over contiguous spans plus random whole-frame masking.

    Spans tile the sequence from frame 0 (the last one may be short); each
    span masks the union of ``groups_per_span`` groups drawn without
    replacement. Frame masking is a union on top, so its order is immaterial.
    """
    if joints != N_JOINTS:
        raise ValueError("group masking is defined for the 26-joint skeleton")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    groups = [np.array(TAXONOMY.masking_groups[g]) for g in MASKING_GROUP_ORDER]
    if not 0 <= groups_per_span <= len(groups):
        raise ValueError("groups_per_span out of range")
    masked = np.zeros((frames, joints), dtype=bool)
    for start in range(0, frames, span_length):
        chosen = rng.choice(len(groups), size=groups_per_span, replace=False)
        cols = np.concatenate([groups[g] for g in chosen]) if groups_per_span else np.array([], dtype=int)
        masked[start:start + span_length, cols] = True
    masked[rng.random(frames) < frame_mask_prob, :] = True
    return MaskPlan(masked, span_length, groups_per_span, frame_mask_prob)


def expected_mask_ratio(groups_per_span: int = 4, frame_mask_prob: float = 0.05) -> float:
    """Closed-form expected masked fraction, by enumerating the group subsets."""
    sizes = [len(TAXONOMY.masking_groups[g]) for g in MASKING_GROUP_ORDER]
    subsets = list(combinations(sizes, groups_per_span))
    group_frac = float(np.mean([sum(s) for s in subsets])) / N_JOINTS
    return group_frac + (1.0 - group_frac) * frame_mask_prob


def apply_mask(x, plan: MaskPlan):
    """Zero every channel of masked (frame, joint) entries; works on arrays or tensors."""
    masked = plan.masked
    if tuple(x.shape[-3:-1]) != masked.shape:
        raise ValueError(f"mask shape {masked.shape} does not match input frames/joints {tuple(x.shape[-3:-1])}")
    if isinstance(x, torch.Tensor):
        keep = torch.from_numpy(~masked).to(x.dtype).unsqueeze(-1)
        return x * keep
    out = np.array(x, copy=True)
    out[..., masked, :] = 0.0
    return out


# -- loss ----------------------------------------------------------------------

@dataclass
class LossBreakdown:
    mpjpe: Tensor
    nmpjpe: Tensor
    velocity: Tensor
    total: Tensor
    lambda1: float = 0.1
    lambda2: float = 0.1

    def as_floats(self) -> Dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("mpjpe", "nmpjpe", "velocity", "total")}


def _safe_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last dim with a zero (not NaN) gradient at the origin."""
    sq = (x * x).sum(dim=-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _weighted_mean(values: Tensor, weight: Optional[Tensor]) -> Tensor:
    if weight is None:
        return values.mean()
    total = weight.sum()
    return (values * weight).sum() / torch.clamp(total, min=1.0)


def optimal_frame_scale(pred: Tensor, target: Tensor) -> Tensor:
    """Per-frame ``<pred, target> / <pred, pred>`` over joints and coords; 1 where pred is zero."""
    num = (pred * target).sum(dim=(-2, -1), keepdim=True)
    den = (pred * pred).sum(dim=(-2, -1), keepdim=True)
    ok = den > 0
    return torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.ones_like(den))


def reconstruction_loss(
    pred: Tensor,
    target: Tensor,
    plan: Union[MaskPlan, Sequence[MaskPlan], None] = None,
    lambda1: float = 0.1,
    lambda2: float = 0.1,
    masked_only: bool = False,
) -> LossBreakdown:
    """MPJPE + lambda1 * scale-aligned MPJPE + lambda2 * velocity error.

    ``pred`` and ``target`` are ``(..., F, J, 3)``. By default every position
    counts; with ``masked_only`` only the positions masked in ``plan`` do
    (velocity pairs count if either endpoint is masked).
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.shape[-1] != 3:
        raise ValueError("reconstruction must have 3 coordinate channels")
    weight = vel_weight = None
    if masked_only:
        if plan is None:
            raise ValueError("masked_only needs a mask plan")
        plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
        m = np.stack([p.masked for p in plans]).reshape(pred.shape[:-1])
        weight = torch.from_numpy(m).to(pred.dtype)
        vel_weight = torch.from_numpy(m[..., 1:, :] | m[..., :-1, :]).to(pred.dtype)
    mpjpe = _weighted_mean(_safe_norm(pred - target), weight)
    scaled = optimal_frame_scale(pred, target) * pred
    nmpjpe = _weighted_mean(_safe_norm(scaled - target), weight)
    dpred = pred[..., 1:, :, :] - pred[..., :-1, :, :]
    dtarget = target[..., 1:, :, :] - target[..., :-1, :, :]
    if dpred.shape[-3] == 0:
        velocity = pred.new_zeros(())
    else:
        velocity = _weighted_mean(_safe_norm(dpred - dtarget), vel_weight)
    total = mpjpe + lambda1 * nmpjpe + lambda2 * velocity
    return LossBreakdown(mpjpe, nmpjpe, velocity, total, lambda1, lambda2)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
