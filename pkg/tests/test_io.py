import json
import struct

import numpy as np
import pytest

from focusclf.errors import FormatError, IngestionError
from focusclf.io import LesionRecord, read_container, read_manifest, read_volume, write_container, write_manifest, write_volume
from focusclf.rng import Rng


def test_volume_layout(tmp_path):
    vol = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_volume(tmp_path / "v.mpv", vol)
    raw = (tmp_path / "v.mpv").read_bytes()
    assert raw[:4] == b"MPV1"
    assert struct.unpack("<3I", raw[4:16]) == (2, 3, 4)
    assert len(raw) == 16 + 24 * 4
    assert struct.unpack("<f", raw[16 + 5 * 4 : 16 + 6 * 4])[0] == 5.0
    assert np.array_equal(read_volume(tmp_path / "v.mpv"), vol)


def test_volume_2d_gets_depth_one(tmp_path):
    write_volume(tmp_path / "r.mpv", np.ones((3, 5)))
    assert read_volume(tmp_path / "r.mpv").shape == (1, 3, 5)


def test_volume_errors(tmp_path):
    (tmp_path / "bad.mpv").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FormatError):
        read_volume(tmp_path / "bad.mpv")
    write_volume(tmp_path / "short.mpv", np.ones((2, 2, 2)))
    data = (tmp_path / "short.mpv").read_bytes()
    (tmp_path / "short.mpv").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        read_volume(tmp_path / "short.mpv")
    with pytest.raises(IngestionError):
        read_volume(tmp_path / "missing.mpv")


def rec(i, label="benign"):
    return LesionRecord(f"P{i}", f"P{i}-L0", "CG", label, (1, 2, 3), {"T2W": f"vol/P{i}_T2W.mpv"})


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.jsonl", [rec(0), rec(1, "malignant")])
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    obj = json.loads(lines[0])
    assert set(obj) == {"patient_id", "lesion_id", "zone", "label", "center", "modalities"}
    assert obj["center"] == [1, 2, 3]
    back = read_manifest(tmp_path / "m.jsonl")
    assert back[1].label == "malignant"
    assert back[0].modalities["T2W"] == str(tmp_path / "vol/P0_T2W.mpv")


def test_manifest_rejects(tmp_path):
    write_manifest(tmp_path / "dup.jsonl", [rec(0), rec(0)])
    with pytest.raises(IngestionError):
        read_manifest(tmp_path / "dup.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"patient_id": "a"}\n')
    with pytest.raises(IngestionError):
        read_manifest(tmp_path / "bad.jsonl")
    with pytest.raises(IngestionError):
        LesionRecord("a", "a-L0", "PZ", "maybe", (0, 0, 0), {})
    write_manifest(tmp_path / "u.jsonl", [rec(0, "unknown")])
    assert read_manifest(tmp_path / "u.jsonl")[0].label == "unknown"
    with pytest.raises(IngestionError):
        read_manifest(tmp_path / "u.jsonl", allow_unknown=False)


def test_container_round_trip(tmp_path):
    r = Rng(0)
    tensors = {"a": r.normal((3, 4)).astype(np.float32), "b.c": np.arange(5, dtype=np.float32)}
    write_container(tmp_path / "x.fclf", {"kind": "CNN", "n": 1}, tensors, {"epochs": [1, 2]})
    raw = (tmp_path / "x.fclf").read_bytes()
    assert raw[:4] == b"FCLF" and struct.unpack("<I", raw[4:8]) == (1,)
    header, back, log = read_container(tmp_path / "x.fclf")
    assert header == {"kind": "CNN", "n": 1} and log == {"epochs": [1, 2]}
    assert list(back) == ["a", "b.c"]
    assert all(np.array_equal(tensors[k], back[k]) for k in tensors)


def test_container_corruption(tmp_path):
    write_container(tmp_path / "x.fclf", {"kind": "WELM"}, {"A": np.ones((2, 2))})
    raw = (tmp_path / "x.fclf").read_bytes()
    (tmp_path / "trail.fclf").write_bytes(raw + b"\0")
    (tmp_path / "cut.fclf").write_bytes(raw[:-10])
    (tmp_path / "magic.fclf").write_bytes(b"XXXX" + raw[4:])
    for name in ("trail", "cut", "magic"):
        with pytest.raises(FormatError):
            read_container(tmp_path / f"{name}.fclf")
