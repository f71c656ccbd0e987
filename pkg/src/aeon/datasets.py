"""Synthetic workloads: clustered vector datasets and conversational queries.

Dense Forest: `cluster_count` random unit centers; each vector is a center
plus a perturbation of expected norm `cluster_spread`, renormalized. Inside a
cluster cosine similarity is ~1/sqrt(1 + spread^2); across clusters it is ~0,
so intra-cluster similarity dominates by construction.

Conversational Walk: a query stream with semantic inertia. Each step moves by
a 0.05-norm random direction (consecutive similarity ~0.99875); with
probability 0.1 the walk jumps to a fresh topic drawn from the indexed
vectors, so a cache keyed on similarity can meaningfully hit between jumps.

Dataset file format: 16-byte header (magic "AEDV", count u64, dim u32) then
count rows of dim float32, little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InvalidArgumentError, StorageError

DATASET_MAGIC = b"AEDV"
_DS_HDR = struct.Struct("<4sQI")


def dense_forest(n: int, dim: int = 768, cluster_count: int | None = None,
                 cluster_spread: float = 0.35, seed: int = 0) -> np.ndarray:
    if n < 1 or dim < 1:
        raise InvalidArgumentError("n and dim must be positive")
    if cluster_count is None:
        cluster_count = max(1, min(n, n // 100 or 1))
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((cluster_count, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    assign = rng.integers(0, cluster_count, size=n)
    noise = rng.standard_normal((n, dim))
    noise *= cluster_spread / np.sqrt(dim)  # expected perturbation norm = spread
    vecs = centers[assign] + noise
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return np.ascontiguousarray(vecs, dtype=np.float32)


def conversational_walk(n_queries: int, topics: np.ndarray, step: float = 0.05,
                        jump_prob: float = 0.1, seed: int = 0) -> np.ndarray:
    """Query stream over `topics` rows (normalized); see module docstring."""
    if n_queries < 1:
        raise InvalidArgumentError("need at least one query")
    rng = np.random.default_rng(seed)
    dim = topics.shape[1]
    out = np.empty((n_queries, dim), dtype=np.float32)
    q = np.array(topics[rng.integers(0, len(topics))], dtype=np.float64)
    for i in range(n_queries):
        if i > 0 and rng.random() < jump_prob:
            q = np.array(topics[rng.integers(0, len(topics))], dtype=np.float64)
        else:
            g = rng.standard_normal(dim)
            g *= step / np.linalg.norm(g)
            q = q + g
            q /= np.linalg.norm(q)
        out[i] = q.astype(np.float32)
    return out


def save_dataset(path: str, vectors: np.ndarray) -> None:
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise InvalidArgumentError("expected a (count, dim) array")
    with open(path, "wb") as f:
        f.write(_DS_HDR.pack(DATASET_MAGIC, arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def load_dataset(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        hdr = f.read(_DS_HDR.size)
        if len(hdr) != _DS_HDR.size:
            raise StorageError(f"{path}: truncated header")
        magic, count, dim = _DS_HDR.unpack(hdr)
        if magic != DATASET_MAGIC:
            raise StorageError(f"{path}: bad magic {magic!r}")
        data = np.fromfile(f, dtype="<f4", count=count * dim)
    if data.size != count * dim:
        raise StorageError(f"{path}: expected {count * dim} floats, got {data.size}")
    return data.reshape(count, dim)
