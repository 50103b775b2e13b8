"""Checkpoint container: one JSON header line, then little-endian f32 blobs.

The header carries a mandatory version field, the model config, and a tensor
manifest (name, shape, byte offset into the blob section). Written bytes are
deterministic for identical inputs (sorted keys, fixed float formatting).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, kind: str, config: dict, tensors: dict[str, np.ndarray], extra: dict | None = None):
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": manifest,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('version')!r}")
        blob = f.read()
    tensors = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=ent["offset"])
        tensors[ent["name"]] = arr.reshape(shape).astype(np.float32)
    return header, tensors


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def bytes_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
