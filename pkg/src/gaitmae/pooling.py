"""Hierarchical pooling of frozen-encoder latents into fixed-length embeddings."""

from __future__ import annotations

import hashlib
import io as _io
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import torch

from .io import FormatError, read_tsv, write_tsv
from .skeleton import (
    ATTRIBUTION_GROUP_ORDER,
    MASKING_GROUP_ORDER,
    N_JOINTS,
    TAXONOMY,
    Activity,
    SkeletonSequence,
)

logger = logging.getLogger(__name__)

VARIANTS: Tuple[str, ...] = ("V1", "V2", "V3", "V4", "V5")
PERCENTILE = 99.0


def _check_latent(latent: np.ndarray, name: str = "latent") -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3:
        raise ValueError(f"{name} must be (frames, joints, channels), got shape {latent.shape}")
    if latent.shape[0] < 1:
        raise ValueError(f"{name} has no frames")
    return latent


def pool_v1(latent: np.ndarray) -> np.ndarray:
    """Global mean and max over frames and joints."""
    z = _check_latent(latent)
    return np.concatenate([z.mean(axis=(0, 1)), z.max(axis=(0, 1))])


def pool_v2(latent: np.ndarray) -> np.ndarray:
    """Per-frame joint mean, max and std, then averaged over frames."""
    z = _check_latent(latent)
    per_frame = np.concatenate([z.mean(axis=1), z.max(axis=1), z.std(axis=1)], axis=-1)
    return per_frame.mean(axis=0)


def pool_v3(latent: np.ndarray) -> np.ndarray:
    """Spatio-temporal mean inside each of the six masking regions."""
    z = _check_latent(latent)
    if z.shape[1] != N_JOINTS:
        raise ValueError(f"V3 needs {N_JOINTS} joints")
    return np.concatenate([z[:, list(TAXONOMY.masking_groups[g])].mean(axis=(0, 1)) for g in MASKING_GROUP_ORDER])


def pool_v4(prelogits: np.ndarray) -> np.ndarray:
    """Temporal mean per joint of the decoder's last hidden layer, joints concatenated."""
    z = _check_latent(prelogits, "prelogits")
    return z.mean(axis=0).reshape(-1)


def pool_v5(latent: np.ndarray) -> np.ndarray:
    """Temporal mean and 99th percentile per joint, averaged within Head, Torso, Arms, Legs.

    Percentiles interpolate linearly between order statistics.
    """
    z = _check_latent(latent)
    if z.shape[0] < 2:
        raise ValueError("V5 needs at least 2 frames")
    if z.shape[1] != N_JOINTS:
        raise ValueError(f"V5 needs {N_JOINTS} joints")
    stats = np.concatenate([z.mean(axis=0), np.percentile(z, PERCENTILE, axis=0, method="linear")], axis=-1)
    return np.concatenate([stats[list(TAXONOMY.attribution_groups[g])].mean(axis=0) for g in ATTRIBUTION_GROUP_ORDER])


POOLERS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "V1": pool_v1, "V2": pool_v2, "V3": pool_v3, "V4": pool_v4, "V5": pool_v5,
}


def parse_variant(name: str) -> str:
    v = str(name).strip().upper()
    if v not in POOLERS:
        raise ValueError(f"unknown pooling variant {name!r}; valid variants: {', '.join(VARIANTS)}")
    return v


def variant_dim(variant: str, dim: int, prelogit_dim: int = 32, joints: int = N_JOINTS) -> int:
    v = parse_variant(variant)
    return {"V1": 2 * dim, "V2": 3 * dim, "V3": 6 * dim, "V4": joints * prelogit_dim, "V5": 8 * dim}[v]


@dataclass
class EmbeddingRecord:
    subject_id: str
    visit_id: str
    activity: Activity
    sequence_index: int
    variant: str
    vector: np.ndarray
    warning: str = ""  # non-empty when the sequence was skipped

    @property
    def skipped(self) -> bool:
        return bool(self.warning)


def _state_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def embed_dataset(
    sequences: Sequence[SkeletonSequence],
    encoder,
    variants: Union[str, Iterable[str]] = "V5",
) -> Dict[str, List[EmbeddingRecord]]:
    """Pool every sequence under each requested variant with the encoder frozen.

    ``encoder`` is an ``EncoderState`` or a bare ``DSTformer``. Sequences whose
    shape does not match the encoder yield a record carrying a warning and an
    empty vector instead of aborting the run.
    """
    model = getattr(encoder, "model", encoder)
    names = [parse_variant(variants)] if isinstance(variants, str) else [parse_variant(v) for v in variants]
    if not names:
        raise ValueError("no pooling variants requested")
    was_training = model.training
    model.eval()
    before = _state_digest(model)
    dtype = next(model.parameters()).dtype
    out: Dict[str, List[EmbeddingRecord]] = {v: [] for v in names}
    for seq in sequences:
        warning = ""
        if seq.data.shape[1:] != (model.cfg.joints, model.cfg.in_channels):
            warning = f"shape {seq.data.shape} does not match encoder joints/channels"
        elif seq.n_frames < 2:
            warning = "sequence shorter than 2 frames"
        if warning:
            logger.warning("skipping %s/%s/%s: %s", seq.subject_id, seq.visit_id, seq.activity.name, warning)
            for v in names:
                out[v].append(EmbeddingRecord(seq.subject_id, seq.visit_id, seq.activity, seq.sequence_index,
                                              v, np.zeros(0), warning))
            continue
        latent_t = model.encode(torch.from_numpy(seq.data).to(dtype))
        latent = latent_t.double().numpy()
        prelogits = model.prelogits(latent_t).double().numpy() if "V4" in names else None
        for v in names:
            vec = POOLERS[v](prelogits if v == "V4" else latent)
            out[v].append(EmbeddingRecord(seq.subject_id, seq.visit_id, seq.activity, seq.sequence_index,
                                          v, vec.astype(np.float32)))
    if _state_digest(model) != before:
        raise RuntimeError("encoder parameters changed during embedding")
    model.train(was_training)
    return out


# -- embedding tables ----------------------------------------------------------

EMB_MAGIC = b"GEM1"
EMB_VERSION = 1


def _valid(records: Sequence[EmbeddingRecord]) -> List[EmbeddingRecord]:
    kept = [r for r in records if not r.skipped]
    if not kept:
        raise ValueError("no embeddings to write")
    variants = {r.variant for r in kept}
    dims = {r.vector.shape[0] for r in kept}
    if len(variants) != 1 or len(dims) != 1:
        raise ValueError("an embedding table holds one variant of one dimension")
    return kept


def write_embedding_tsv(path, records: Sequence[EmbeddingRecord], checkpoint_hash: str) -> None:
    kept = _valid(records)
    dim = kept[0].vector.shape[0]
    header = ["subject_id", "visit_id", "activity", "sequence_index"] + [f"f{i}" for i in range(dim)]
    rows = []
    for r in kept:
        # shortest repr that round-trips the stored float32
        rows.append([r.subject_id, r.visit_id, r.activity.name, r.sequence_index]
                    + [np.format_float_positional(x, unique=True, trim="-") if np.isfinite(x) else "nan"
                       for x in r.vector.astype(np.float32)])
    write_tsv(path, header, rows, [f"variant={kept[0].variant} dim={dim} checkpoint={checkpoint_hash}"])


def read_embedding_tsv(path) -> Tuple[Dict[str, str], List[EmbeddingRecord]]:
    header, rows, meta = read_tsv(path)
    for key in ("variant", "dim", "checkpoint"):
        if key not in meta:
            raise FormatError(f"{path}: header lacks {key}")
    dim = int(meta["dim"])
    if len(header) != 4 + dim:
        raise FormatError(f"{path}: header has {len(header) - 4} feature columns, dim says {dim}")
    variant = parse_variant(meta["variant"])
    records = [
        EmbeddingRecord(r[0], r[1], Activity.parse(r[2]), int(r[3]), variant,
                        np.array([float(x) for x in r[4:]], dtype=np.float32))
        for r in rows
    ]
    return meta, records


def encode_embedding_table(records: Sequence[EmbeddingRecord], checkpoint_hash: str) -> bytes:
    kept = _valid(records)
    dim = kept[0].vector.shape[0]
    buf = _io.BytesIO()
    meta = json.dumps({"variant": kept[0].variant, "dim": dim, "checkpoint": checkpoint_hash}, sort_keys=True).encode()
    buf.write(EMB_MAGIC + struct.pack("<HI", EMB_VERSION, len(meta)) + meta)
    buf.write(struct.pack("<I", len(kept)))
    for r in kept:
        for text in (r.subject_id, r.visit_id):
            raw = text.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BI", int(r.activity), r.sequence_index))
        buf.write(r.vector.astype("<f4").tobytes())
    return buf.getvalue()


def decode_embedding_table(raw: bytes) -> Tuple[Dict[str, object], List[EmbeddingRecord]]:
    buf = _io.BytesIO(raw)

    def take(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError("truncated embedding table")
        return chunk

    if take(4) != EMB_MAGIC:
        raise FormatError("not an embedding table")
    version, meta_len = struct.unpack("<HI", take(6))
    if version != EMB_VERSION:
        raise FormatError(f"unsupported embedding table version {version}")
    meta = json.loads(take(meta_len))
    variant, dim = parse_variant(meta["variant"]), int(meta["dim"])
    (n,) = struct.unpack("<I", take(4))
    records = []
    for _ in range(n):
        sid = take(struct.unpack("<H", take(2))[0]).decode("utf-8")
        vid = take(struct.unpack("<H", take(2))[0]).decode("utf-8")
        act, idx = struct.unpack("<BI", take(5))
        vec = np.frombuffer(take(4 * dim), dtype="<f4").astype(np.float32)
        records.append(EmbeddingRecord(sid, vid, Activity(act), idx, variant, vec))
    if buf.read(1):
        raise FormatError("trailing bytes after embedding table")
    return meta, records


def write_embedding_table(path, records: Sequence[EmbeddingRecord], checkpoint_hash: str) -> None:
    """Binary form for ``.gem`` paths, tab-separated text otherwise."""
    path = Path(path)
    if path.suffix == ".gem":
        path.write_bytes(encode_embedding_table(records, checkpoint_hash))
    else:
        write_embedding_tsv(path, records, checkpoint_hash)


def read_embedding_table(path) -> Tuple[Dict[str, object], List[EmbeddingRecord]]:
    path = Path(path)
    if path.suffix == ".gem":
        return decode_embedding_table(path.read_bytes())
    return read_embedding_tsv(path)


def records_matrix(records: Sequence[EmbeddingRecord]) -> Tuple[List[Tuple[str, str, Activity]], np.ndarray]:
    """Stack non-skipped records into ``(keys, X)``; keys are (subject, visit, activity)."""
    kept = [r for r in records if not r.skipped]
    if not kept:
        return [], np.zeros((0, 0))
    return [(r.subject_id, r.visit_id, r.activity) for r in kept], np.stack([r.vector for r in kept]).astype(np.float64)
