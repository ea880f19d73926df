"""Binary PGM (P5) writer — the one image format the toolkit emits."""

from __future__ import annotations

import numpy as np


def write_pgm(gray: np.ndarray, path) -> None:
    """Write a 2-D uint8 array as binary PGM, maxval 255."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("write_pgm wants a 2-D uint8 array")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back a binary PGM written by write_pgm (tests use this)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise ValueError("unsupported maxval")
    data = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    return data.reshape(h, w).copy()
