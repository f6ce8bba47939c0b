"""On-disk formats for images and masks.

Images are raw little-endian float32, row-major, next to a JSON sidecar
``{"height": H, "width": W, "dtype": "f32le"}`` that shares the stem and uses
the ``.json`` suffix.  Masks use the same format and can additionally be
exported as binary PGM (P5, 0/255).
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

DTYPE_TAG = "f32le"


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_raw(path, array) -> Path:
    path = Path(path)
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {arr.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = {"height": int(arr.shape[0]), "width": int(arr.shape[1]), "dtype": DTYPE_TAG}
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")
    return path


def read_raw_meta(path) -> tuple[int, int]:
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"missing sidecar {side}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed sidecar {side}: {exc}") from None
    if meta.get("dtype") != DTYPE_TAG:
        raise ValueError(f"{side}: unsupported dtype {meta.get('dtype')!r}")
    try:
        return int(meta["height"]), int(meta["width"])
    except KeyError as exc:
        raise ValueError(f"{side}: missing field {exc.args[0]!r}") from None


def read_raw(path) -> np.ndarray:
    """Read an image written by :func:`write_raw` as float64."""
    path = Path(path)
    h, w = read_raw_meta(path)
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} floats, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


def read_mask(path) -> np.ndarray:
    arr = read_raw(path)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{path}: mask values must be 0 or 1")
    return arr.astype(np.uint8)


def pgm_bytes(mask) -> bytes:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {m.shape}")
    body = np.where(m > 0, 255, 0).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    return header + body.tobytes()


def write_pgm(path, mask) -> None:
    """Write a binary PGM; ``"-"`` writes to standard output."""
    data = pgm_bytes(mask)
    if str(path) == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM written by :func:`write_pgm` back into a {0,1} mask."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + width * height], dtype=np.uint8)
    if pixels.size != width * height or maxval > 255:
        raise ValueError(f"{path}: truncated or unsupported PGM")
    return (pixels.reshape(height, width) > 0).astype(np.uint8)
