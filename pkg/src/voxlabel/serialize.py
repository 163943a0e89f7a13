"""Serialization helpers: run-length encoding, canonical JSON, content hashes."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def rle_encode(arr: np.ndarray) -> list:
    """Row-major run-length encoding: [[value, count], ...]."""
    flat = np.asarray(arr).ravel()
    if flat.size == 0:
        return []
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    return [[flat[s].item(), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs: list, shape: tuple, dtype=float) -> np.ndarray:
    if not runs:
        return np.zeros(shape, dtype=dtype)
    flat = np.concatenate([np.full(count, value, dtype=dtype)
                           for value, count in runs])
    return flat.reshape(shape)


def rle_encode_bool(mask: np.ndarray) -> list:
    return rle_encode(mask.astype(np.uint8))


def rle_decode_bool(runs: list, shape: tuple) -> np.ndarray:
    return rle_decode(runs, shape, dtype=np.uint8).astype(bool)


def canonical_dumps(obj) -> str:
    """Deterministic JSON text: sorted keys, fixed separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(master_seed: int, stage: str, index: int = 0) -> int:
    """Stable per-stage seed from a master seed and a stage label."""
    digest = hashlib.sha256(f"{master_seed}|{stage}|{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)
