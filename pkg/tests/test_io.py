import struct

import numpy as np
import pytest

from conftest import make_seq
from gaitmae.io import (
    FormatError,
    decode_gsk,
    encode_gsk,
    read_gsk,
    read_target_table,
    read_tsv,
    write_gsk,
    write_target_table,
    write_text_debug,
    write_tsv,
)
from gaitmae.skeleton import Activity


def test_gsk_round_trip(tmp_path, rng):
    seq = make_seq(rng.normal(size=(12, 26, 3)).astype(np.float32), subject="sübj", visit="v1",
                   activity=Activity.Romberg, fps=25.0)
    path = tmp_path / "a.gsk"
    write_gsk(path, seq)
    back = read_gsk(path)
    assert (back.subject_id, back.visit_id, back.activity, back.fps) == ("sübj", "v1", Activity.Romberg, 25.0)
    assert np.array_equal(back.data, seq.data)


def test_gsk_header_layout(rng):
    seq = make_seq(rng.normal(size=(3, 26, 3)), subject="ab", visit="c")
    raw = encode_gsk(seq)
    magic, version, fps, frames, joints, channels, act = struct.unpack_from("<4sHfIBBB", raw)
    assert (magic, version, fps, frames, joints, channels) == (b"GSK1", 1, 30.0, 3, 26, 4)
    assert act == int(Activity.TreadmillFixed)
    assert len(raw) == struct.calcsize("<4sHfIBBB") + 2 + 2 + 2 + 1 + 3 * 26 * 4 * 4


def test_gsk_rejects_corruption(rng):
    raw = encode_gsk(make_seq(rng.normal(size=(3, 26, 3))))
    with pytest.raises(FormatError):
        decode_gsk(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        decode_gsk(raw[:-1])
    with pytest.raises(FormatError):
        decode_gsk(raw + b"\0")


def test_text_debug(tmp_path, rng):
    seq = make_seq(rng.normal(size=(4, 26, 3)))
    path = tmp_path / "a.txt"
    write_text_debug(path, seq)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# subject=S0")
    assert len(lines) == 5
    assert len(lines[1].split()) == 26 * 4


def test_tsv_and_target_table(tmp_path):
    path = tmp_path / "t.tsv"
    targets = {("S1", "v0"): {"a": 1.5, "b": float("nan")}, ("S2", "v0"): {"a": -2.0, "b": 0.1}}
    write_target_table(path, targets, ["a", "b"])
    cols, back = read_target_table(path)
    assert cols == ["a", "b"]
    assert back[("S1", "v0")]["a"] == 1.5 and np.isnan(back[("S1", "v0")]["b"])
    assert back[("S2", "v0")]["b"] == 0.1
    write_tsv(path, ["x", "y"], [[1, 2.0]], comments=["k=v other=3"])
    header, rows, meta = read_tsv(path)
    assert header == ["x", "y"] and rows == [["1", "2.0"]] and meta == {"k": "v", "other": "3"}
    with pytest.raises(FormatError):
        write_tsv(path, ["x"], [[1, 2]])
