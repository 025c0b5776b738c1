"""Denoising masked-autoencoder pretraining loop and encoder checkpoints."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .dstformer import DSTformer, EncoderConfig, MaskPlan, apply_mask, reconstruction_loss, sample_mask
from .numeric import (
    OptimizerState,
    adamw_step,
    backward,
    decode_checkpoint,
    encode_checkpoint,
    lr_schedule,
    warmup_steps_for,
)
from .skeleton import SkeletonSequence

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"loss became non-finite at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass
class PretrainConfig:
    blocks: int = 8
    dim: int = 128
    heads: int = 8
    mlp_ratio: float = 4.0
    decoder_hidden: Tuple[int, int] = (32, 32)
    fusion: str = "adaptive"
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 0.01
    batch: int = 8
    epochs: int = 10
    steps: int = 0  # overrides epochs when > 0
    warmup_epochs: float = 0.3
    warmup_steps: int = -1  # explicit warmup length; negative = derive from warmup_epochs
    seed: int = 0
    crop: int = 0  # random training window length; 0 = whole sequence
    holdout: float = 0.1
    sigma: float = 0.05
    mask_span: int = 16
    mask_groups: int = 4
    mask_frame_prob: float = 0.05
    lambda1: float = 0.1
    lambda2: float = 0.1
    masked_only: bool = False
    eval_every: int = 0  # steps between held-out evaluations; 0 = once per epoch
    dtype: str = "float32"

    # dotted keys accepted in config files
    ALIASES = {
        "mask.span": "mask_span",
        "mask.groups": "mask_groups",
        "mask.frame_prob": "mask_frame_prob",
        "loss.lambda1": "lambda1",
        "loss.lambda2": "lambda2",
        "loss.masked_only": "masked_only",
    }

    def __post_init__(self):
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must be in [0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            blocks=self.blocks, dim=self.dim, heads=self.heads, mlp_ratio=self.mlp_ratio,
            decoder_hidden=self.decoder_hidden, fusion=self.fusion,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_mapping(cls, values: Dict[str, object]) -> "PretrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = cls.ALIASES.get(key, key.replace(".", "_"))
            if name not in known:
                raise KeyError(f"unknown pretraining config key {key!r}")
            kwargs[name] = _coerce(raw, known[name].default)
        return cls(**kwargs)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


@dataclass
class EncoderState:
    """A model plus everything needed to resume or reproduce it."""

    model: DSTformer
    optimizer: Optional[OptimizerState] = None
    step: int = 0
    meta: Dict[str, object] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = dict(self.meta)
        meta["encoder"] = self.model.cfg.to_dict()
        meta["step"] = self.step
        params = {n: p for n, p in self.model.named_parameters()}
        return encode_checkpoint(params, meta, self.optimizer)

    def save(self, path: Union[str, Path]) -> str:
        raw = self.to_bytes()
        Path(path).write_bytes(raw)
        return hashlib.sha256(raw).hexdigest()

    @classmethod
    def from_bytes(cls, raw: bytes, dtype: torch.dtype = torch.float32) -> "EncoderState":
        params, meta, opt = decode_checkpoint(raw)
        cfg = EncoderConfig.from_dict(meta["encoder"])
        model = DSTformer(cfg).to(dtype)
        expected = dict(model.named_parameters())
        if set(expected) != set(params):
            missing = sorted(set(expected) ^ set(params))
            raise ValueError(f"checkpoint parameters do not match the architecture: {missing[:5]}")
        with torch.no_grad():
            for name, p in expected.items():
                if tuple(params[name].shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {name}")
                p.copy_(params[name].to(dtype))
        if opt is not None:
            opt.m = {k: v.to(dtype) for k, v in opt.m.items()}
            opt.v = {k: v.to(dtype) for k, v in opt.v.items()}
        return cls(model, opt, int(meta.get("step", 0)), {k: v for k, v in meta.items() if k not in ("encoder", "step")})

    @classmethod
    def load(cls, path: Union[str, Path], dtype: torch.dtype = torch.float32) -> "EncoderState":
        return cls.from_bytes(Path(path).read_bytes(), dtype)


def split_holdout(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Random train / held-out index split; at least one training item."""
    order = np.random.default_rng([seed, 7919]).permutation(n)
    n_out = int(round(fraction * n))
    n_out = min(n_out, n - 1)
    return np.sort(order[n_out:]), np.sort(order[:n_out])


def _stack(seqs: Sequence[SkeletonSequence], dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.data for s in seqs])).to(dtype)


def _crop(x: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    if crop <= 0 or crop >= x.shape[0]:
        return x
    start = int(rng.integers(0, x.shape[0] - crop + 1))
    return x[start:start + crop]


@torch.no_grad()
def evaluate_reconstruction(
    model: DSTformer,
    sequences: Sequence[SkeletonSequence],
    cfg: PretrainConfig,
    mask_seed: int = 12345,
    batch: int = 8,
) -> Dict[str, float]:
    """Mean loss terms reconstructing clean sequences from fixed-seed masked inputs."""
    if not sequences:
        return {}
    dtype = next(model.parameters()).dtype
    sums = {"mpjpe": 0.0, "nmpjpe": 0.0, "velocity": 0.0, "total": 0.0}
    for start in range(0, len(sequences), batch):
        chunk = sequences[start:start + batch]
        x = _stack(chunk, dtype)
        plans = [
            sample_mask(x.shape[1], rng_seed=[mask_seed, start + i], span_length=cfg.mask_span,
                        groups_per_span=cfg.mask_groups, frame_mask_prob=cfg.mask_frame_prob)
            for i in range(len(chunk))
        ]
        inp = torch.stack([apply_mask(x[i], p) for i, p in enumerate(plans)])
        pred = model(inp)
        loss = reconstruction_loss(pred, x[..., :3], plans, cfg.lambda1, cfg.lambda2, cfg.masked_only)
        for k, v in loss.as_floats().items():
            sums[k] += v * len(chunk)
    return {k: v / len(sequences) for k, v in sums.items()}


@dataclass
class PretrainResult:
    state: EncoderState
    curve: List[Dict[str, float]]
    evals: List[Dict[str, float]]
    train_index: np.ndarray
    holdout_index: np.ndarray


def pretrain(
    sequences: Sequence[SkeletonSequence],
    cfg: PretrainConfig,
    resume: Optional[EncoderState] = None,
    extra_steps: int = 0,
) -> PretrainResult:
    """Train the encoder on clean + jittered copies under fresh composite masks.

    Per-step randomness is derived from ``(seed, step)``, so a resumed run
    continues exactly where an uninterrupted one would have been.
    """
    if not sequences:
        raise ValueError("no training sequences")
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    train_idx, out_idx = split_holdout(len(sequences), cfg.holdout, cfg.seed)
    train = [sequences[i] for i in train_idx]
    held_out = [sequences[i] for i in out_idx]

    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch))
    total_steps = cfg.steps if cfg.steps > 0 else cfg.epochs * steps_per_epoch
    if cfg.warmup_steps >= 0:
        warmup = min(cfg.warmup_steps, total_steps)
    else:
        warmup = warmup_steps_for(steps_per_epoch, cfg.warmup_epochs)
    eval_every = cfg.eval_every if cfg.eval_every > 0 else steps_per_epoch

    if resume is None:
        torch.manual_seed(cfg.seed)
        model = DSTformer(cfg.encoder_config()).to(dtype)
        opt = OptimizerState(lr=cfg.lr_max, weight_decay=cfg.weight_decay)
        start_step = 0
    else:
        model = resume.model.to(dtype)
        opt = resume.optimizer or OptimizerState(lr=cfg.lr_max, weight_decay=cfg.weight_decay)
        start_step = resume.step
        if extra_steps:
            total_steps = start_step + extra_steps
    params = dict(model.named_parameters())

    curve: List[Dict[str, float]] = []
    evals: List[Dict[str, float]] = []
    model.train()
    for step in range(start_step, total_steps):
        rng = np.random.default_rng([cfg.seed, step])
        picks = rng.choice(len(train), size=min(cfg.batch, len(train)), replace=False)
        clean = np.stack([_crop(train[i].data, cfg.crop, rng) for i in picks])
        noisy = clean.copy()
        if cfg.sigma > 0:
            noisy[..., :3] += rng.normal(0.0, cfg.sigma, size=noisy[..., :3].shape)
        both = np.concatenate([clean, noisy])
        plans = [
            sample_mask(both.shape[1], rng_seed=rng, span_length=cfg.mask_span,
                        groups_per_span=cfg.mask_groups, frame_mask_prob=cfg.mask_frame_prob)
            for _ in range(both.shape[0])
        ]
        masked = np.stack([apply_mask(b, p) for b, p in zip(both, plans)])
        inp = torch.from_numpy(masked).to(dtype)
        target = torch.from_numpy(np.concatenate([clean, clean])[..., :3]).to(dtype)

        try:
            pred = model(inp)
        except FloatingPointError as exc:
            raise TrainingDiverged(step + 1, str(exc)) from exc
        loss = reconstruction_loss(pred, target, plans, cfg.lambda1, cfg.lambda2, cfg.masked_only)
        if not torch.isfinite(loss.total):
            raise TrainingDiverged(step + 1)
        grads = backward(loss.total, params)
        lr = lr_schedule(step, total_steps, warmup, cfg.lr_max, cfg.lr_min)
        adamw_step(params, grads, opt, lr)
        record = {"step": step + 1, "lr": lr, **loss.as_floats()}
        curve.append(record)

        if (step + 1) % eval_every == 0 or step + 1 == total_steps:
            model.eval()
            ev = {"step": step + 1}
            for label, subset in (("train", train), ("holdout", held_out)):
                for k, v in evaluate_reconstruction(model, subset, cfg).items():
                    ev[f"{label}_{k}"] = v
            evals.append(ev)
            model.train()
            logger.info("step %d loss %.5f eval %s", step + 1, record["total"], ev)

    model.eval()
    state = EncoderState(model, opt, total_steps, {"pretrain": cfg.to_dict()})
    return PretrainResult(state, curve, evals, train_idx, out_idx)
