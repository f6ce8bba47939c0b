import json

import numpy as np
import pytest

from acwenet import io


def test_raw_roundtrip(tmp_path):
    arr = np.random.default_rng(0).uniform(0, 3, size=(9, 13)).astype(np.float32)
    path = io.write_raw(tmp_path / "a.f32", arr)
    meta = json.loads(io.sidecar_path(path).read_text())
    assert meta == {"height": 9, "width": 13, "dtype": "f32le"}
    assert path.stat().st_size == 9 * 13 * 4
    np.testing.assert_array_equal(io.read_raw(path), arr.astype(np.float64))


def test_raw_is_little_endian(tmp_path):
    path = io.write_raw(tmp_path / "b.f32", np.full((1, 2), 1.0))
    assert path.read_bytes()[:4] == b"\x00\x00\x80\x3f"


def test_missing_sidecar(tmp_path):
    (tmp_path / "c.f32").write_bytes(b"\0" * 16)
    with pytest.raises(FileNotFoundError, match="sidecar"):
        io.read_raw(tmp_path / "c.f32")


def test_size_mismatch(tmp_path):
    path = io.write_raw(tmp_path / "d.f32", np.zeros((4, 4)))
    path.write_bytes(b"\0" * 12)
    with pytest.raises(ValueError, match="expected 16"):
        io.read_raw(path)


def test_mask_rejects_non_binary(tmp_path):
    path = io.write_raw(tmp_path / "m.f32", np.array([[0, 0.5], [1, 0]]))
    with pytest.raises(ValueError, match="0 or 1"):
        io.read_mask(path)


def test_pgm_roundtrip(tmp_path):
    mask = (np.random.default_rng(1).uniform(size=(7, 5)) > 0.5).astype(np.uint8)
    io.write_pgm(tmp_path / "m.pgm", mask)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n5 7\n255\n")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "m.pgm"), mask)


def test_pgm_stdout(capfdbinary):
    io.write_pgm("-", np.eye(3, dtype=np.uint8))
    out = capfdbinary.readouterr().out
    assert out == b"P5\n3 3\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255])
