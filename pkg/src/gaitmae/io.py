"""On-disk formats: binary ``.gsk`` skeletons, text debug dumps and TSV tables."""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .skeleton import Activity, SkeletonSequence

PathLike = Union[str, Path]

GSK_MAGIC = b"GSK1"
GSK_VERSION = 1
_GSK_HEADER = struct.Struct("<4sHfIBBB")


class FormatError(ValueError):
    """Raised when a file does not match its declared format."""


def _write_str(buf, text: str) -> None:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError("identifier too long")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise FormatError("truncated file")
    return raw


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def encode_gsk(seq: SkeletonSequence) -> bytes:
    frames, joints, channels = seq.data.shape
    buf = io.BytesIO()
    buf.write(_GSK_HEADER.pack(GSK_MAGIC, GSK_VERSION, seq.fps, frames, joints, channels, int(seq.activity)))
    _write_str(buf, seq.subject_id)
    _write_str(buf, seq.visit_id)
    buf.write(np.ascontiguousarray(seq.data, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_gsk(raw: bytes) -> SkeletonSequence:
    buf = io.BytesIO(raw)
    magic, version, fps, frames, joints, channels, activity = _GSK_HEADER.unpack(_read_exact(buf, _GSK_HEADER.size))
    if magic != GSK_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != GSK_VERSION:
        raise FormatError(f"unsupported .gsk version {version}")
    subject_id = _read_str(buf)
    visit_id = _read_str(buf)
    count = frames * joints * channels
    payload = _read_exact(buf, 4 * count)
    if buf.read(1):
        raise FormatError("trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(frames, joints, channels).astype(np.float64)
    return SkeletonSequence(subject_id, visit_id, Activity(activity), data, float(fps))


def write_gsk(path: PathLike, seq: SkeletonSequence) -> None:
    Path(path).write_bytes(encode_gsk(seq))


def read_gsk(path: PathLike) -> SkeletonSequence:
    return decode_gsk(Path(path).read_bytes())


def write_text_debug(path: PathLike, seq: SkeletonSequence) -> None:
    """One frame per line, joint-major then channel-major, space separated."""
    lines = [
        f"# subject={seq.subject_id} visit={seq.visit_id} activity={seq.activity.name} "
        f"fps={seq.fps:g} shape={'x'.join(map(str, seq.data.shape))}"
    ]
    for frame in seq.data.reshape(seq.n_frames, -1):
        lines.append(" ".join(f"{v:.6g}" for v in frame))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        if np.isnan(value):
            return "nan"
        return repr(float(value))
    return str(value)


def write_tsv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> None:
    out = [f"# {c}" for c in comments]
    out.append("\t".join(header))
    for row in rows:
        if len(row) != len(header):
            raise FormatError(f"row has {len(row)} cells, header has {len(header)}")
        out.append("\t".join(_format_cell(v) for v in row))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_tsv(path: PathLike) -> Tuple[List[str], List[List[str]], Dict[str, str]]:
    """Return header, raw string rows and ``key=value`` pairs from comment lines."""
    meta: Dict[str, str] = {}
    header: List[str] = []
    rows: List[List[str]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
            continue
        cells = line.split("\t")
        if not header:
            header = cells
        else:
            if len(cells) != len(header):
                raise FormatError(f"{path}: row has {len(cells)} cells, header has {len(header)}")
            rows.append(cells)
    if not header:
        raise FormatError(f"{path}: missing header row")
    return header, rows, meta


def write_target_table(path: PathLike, targets: Mapping[Tuple[str, str], Mapping[str, float]], columns: Sequence[str]) -> None:
    rows = [[sid, vid] + [targets[(sid, vid)][c] for c in columns] for sid, vid in targets]
    write_tsv(path, ["subject_id", "visit_id", *columns], rows)


def read_target_table(path: PathLike) -> Tuple[List[str], Dict[Tuple[str, str], Dict[str, float]]]:
    header, rows, _ = read_tsv(path)
    if header[:2] != ["subject_id", "visit_id"]:
        raise FormatError(f"{path}: target table must start with subject_id, visit_id")
    columns = header[2:]
    table = {}
    for row in rows:
        table[(row[0], row[1])] = {c: (float(v) if v not in ("", "nan") else float("nan")) for c, v in zip(columns, row[2:])}
    return columns, table
