"""Binary netpbm readers/writers: P5 (PGM, grayscale) and P6 (PPM, RGB).

Only maxval 255 is supported; payloads are raw row-major uint8, so a write
followed by a read is bit-exact.
"""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    pass


def write_pgm(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim != 2:
        raise NetpbmError(f"PGM needs a 2-d array, got shape {array.shape}")
    h, w = array.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(array.tobytes())


def write_ppm(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim != 3 or array.shape[2] != 3:
        raise NetpbmError(f"PPM needs an (H, W, 3) array, got shape {array.shape}")
    h, w, _ = array.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(array.tobytes())


def _tokens(data: bytes):
    """Yield whitespace-separated header tokens, skipping '#' comments."""
    i = 0
    while i < len(data):
        ch = data[i:i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            j = data.find(b"\n", i)
            i = len(data) if j < 0 else j + 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            yield i, data[i:j]
            i = j


def read_netpbm(path) -> np.ndarray:
    """Read a P5 or P6 file; returns uint8 (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        data = f.read()
    toks = _tokens(data)
    try:
        _, magic = next(toks)
    except StopIteration:
        raise NetpbmError(f"{path}: empty file") from None
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise NetpbmError(f"{path}: bad magic {magic!r}, expected P5 or P6")
    try:
        _, wtok = next(toks)
        _, htok = next(toks)
        pos, mtok = next(toks)
    except StopIteration:
        raise NetpbmError(f"{path}: truncated header") from None
    try:
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError:
        raise NetpbmError(f"{path}: non-numeric header fields") from None
    if maxval != 255:
        raise NetpbmError(f"{path}: unsupported maxval {maxval} (need 255)")
    payload = data[pos + len(mtok) + 1:]
    need = w * h * channels
    if len(payload) < need:
        raise NetpbmError(f"{path}: truncated payload, {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload[:need], dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3))
