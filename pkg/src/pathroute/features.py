"""Planner feature layout and feature files (JSON-lines or packed binary).

Layout of one feature vector with block size D (F = 11 * D):

    block 0                image-summary feature
    block 1 + 2k           last-token text feature under the prompt of path k
    block 2 + 2k           mean text feature under the prompt of path k

with k running over the paths in canonical order. The binary format is
little-endian: magic b"PLNF", u32 D, u64 count, then count * F float64 values.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .paths import N_PATHS, Path

N_BLOCKS = 1 + 2 * N_PATHS
FULL_BLOCK_DIM = 3584
MAGIC = b"PLNF"
_HEADER = struct.Struct("<4sIQ")


def feature_dim(D: int) -> int:
    return N_BLOCKS * D


def block_slice(D: int, path: Path | None = None, kind: str = "image") -> slice:
    """Slice of the feature vector holding one block.

    ``kind`` is "image" (path ignored), "last" or "mean".
    """
    if kind == "image":
        k = 0
    elif kind in ("last", "mean"):
        k = 1 + 2 * Path.parse(path).index + (kind == "mean")
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    return slice(k * D, (k + 1) * D)


def block_dim(F: int) -> int:
    if F % N_BLOCKS:
        raise ValueError(f"feature dimension {F} is not a multiple of {N_BLOCKS}")
    return F // N_BLOCKS


def write_binary(path, X: np.ndarray) -> None:
    X = np.ascontiguousarray(X, dtype="<f8")
    if X.ndim != 2:
        raise ValueError("expected a 2-d feature matrix")
    D = block_dim(X.shape[1])
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, D, X.shape[0]))
        fh.write(X.tobytes())


def read_binary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, D, count = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        F = feature_dim(D)
        body = fh.read()
    if len(body) != count * F * 8:
        raise ValueError(f"{path}: expected {count}x{F} float64 values, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(count, F).astype(np.float64)


def write_jsonl(path, ids, X: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, row in zip(ids, X):
            fh.write(json.dumps({"id": rid, "features": [float(v) for v in row]}) + "\n")


def read_jsonl(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                ids.append(str(obj["id"]))
                rows.append(obj["features"])
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{path}: ragged feature rows")
    return ids, X


def read_features(path) -> tuple[list[str] | None, np.ndarray]:
    """Read either format; binary files carry no ids (rows follow record order)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == MAGIC:
        return None, read_binary(path)
    return read_jsonl(path)
