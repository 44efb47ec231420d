"""Checkpoint files: magic line, version, JSON header, raw little-endian float64.

Layout::

    b"BRMIL-CKPT\\n"
    uint32 LE   format version
    uint64 LE   header length in bytes
    header      UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape"}, ...]}
    payload     tensors in header order, C-contiguous '<f8'
"""

import json
import struct

import numpy as np

MAGIC = b"BRMIL-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict, meta: dict | None = None) -> None:
    names = sorted(tensors)
    header = {
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(np.shape(tensors[k]))} for k in names],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hb)))
        fh.write(hb)
        for k in names:
            fh.write(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes())


def load(path) -> tuple:
    """Return (tensors, meta)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return tensors, header["meta"]


def prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(prefix: str, tensors: dict) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
