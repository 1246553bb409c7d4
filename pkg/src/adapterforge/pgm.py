"""Binary (P5) PGM read/write for images and class masks."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def write_pgm(path, array: np.ndarray, maxval: int = 255):
    a = np.asarray(array)
    if a.ndim != 2:
        raise ShapeError(f"PGM wants a 2-D array, got shape {a.shape}")
    if a.max(initial=0) > maxval:
        raise ShapeError(f"values exceed maxval={maxval}")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(a.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ShapeError(f"{path}: not a binary PGM (P5) file")
    # header = magic, width, height, maxval tokens; '#' comments allowed
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    if maxval > 255:
        raise ShapeError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return pixels.reshape(h, w).copy()
