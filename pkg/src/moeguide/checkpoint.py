"""Versioned binary checkpoints with bit-exact round-trips.

Layout: 8-byte magic, 8-byte little-endian header length, canonical JSON
header (sorted keys), then raw little-endian arrays back to back.  The header
carries format version, model/train config echoes, epoch, optimizer step, RNG
state, and a manifest of (name, dtype, shape, offset) for every array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MOEGUID1"
VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointData:
    version: int
    model_config: dict
    train_config: dict
    epoch: int
    opt_step: int
    rng_state: dict
    arrays: dict  # name -> np.ndarray


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def save_checkpoint(path, *, model_config: dict, train_config: dict, epoch: int,
                    opt_step: int, rng_state: dict, arrays: dict):
    names = list(arrays)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        dtype = _canonical_dtype(arr)
        blob = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": VERSION,
        "model_config": model_config,
        "train_config": train_config,
        "epoch": int(epoch),
        "opt_step": int(opt_step),
        "rng_state": rng_state,
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header["version"] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header['version']}")
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated array '{entry['name']}'")
        arr = np.frombuffer(raw[start:end], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return CheckpointData(
        version=header["version"],
        model_config=header["model_config"],
        train_config=header["train_config"],
        epoch=header["epoch"],
        opt_step=header["opt_step"],
        rng_state=header["rng_state"],
        arrays=arrays,
    )
