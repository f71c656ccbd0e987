"""Semantic lookaside buffer: 64 lock-striped shards of 64 FP32 entries each.

Sessions route to shards by FNV-1a hash, so contention and semantic context
are isolated per tenant: operations on one session never touch another
session's shard (when the hashes differ). Each shard is scanned exhaustively
with FP32 dot products; entries store FP32 centroids regardless of the
index's storage format (INT8 vectors are dequantized on insertion).

A lookup is a hit when the best score strictly exceeds tau_hit; misses are
values, not errors — the caller falls back to the index and inserts the
answer. Replacement inside a full shard evicts the entry with the smallest
last-hit tick (true LRU at K=64 is cheap enough to do exactly).

The SLB is volatile: nothing is persisted, a restart begins cold.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidArgumentError
from .kernels import QuantizedVector

SHARD_COUNT = 64
SHARD_CAPACITY = 64
DEFAULT_TAU_HIT = 0.90

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def route(session_id: str, shard_count: int = SHARD_COUNT) -> int:
    """shard = fnv1a64(session_id) mod shard_count; deterministic."""
    if not session_id:
        raise InvalidArgumentError("session id must be nonempty")
    return fnv1a64(session_id.encode("utf-8")) % shard_count


@dataclass
class LookupOutcome:
    hit: bool
    node_id: int | None
    score: float
    comparisons: int
    shard: int


class _Shard:
    __slots__ = ("centroids", "node_ids", "ticks", "occupancy", "tick", "lock")

    def __init__(self, dim: int):
        self.centroids = np.zeros((SHARD_CAPACITY, dim), dtype=np.float32)
        self.node_ids = np.zeros(SHARD_CAPACITY, dtype=np.uint64)
        self.ticks = np.zeros(SHARD_CAPACITY, dtype=np.uint64)
        self.occupancy = 0
        self.tick = 0
        self.lock = threading.Lock()


class SemanticCache:
    def __init__(self, dim: int, tau_hit: float = DEFAULT_TAU_HIT,
                 shard_count: int = SHARD_COUNT):
        if not -1.0 <= tau_hit <= 1.0:
            raise InvalidArgumentError("tau_hit must lie in [-1, 1]")
        self.dim = dim
        self.tau_hit = tau_hit
        self.shard_count = shard_count
        self._shards = [_Shard(dim) for _ in range(shard_count)]
        self._stats_lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def lookup(self, session_id: str, q) -> LookupOutcome:
        """Exhaustive scan of the routed shard; hit iff best score > tau_hit."""
        qv = kernels.as_fp32_vector(q, self.dim)
        shard_idx = route(session_id, self.shard_count)
        shard = self._shards[shard_idx]
        with shard.lock:
            occ = shard.occupancy
            if occ == 0:
                self._count(hit=False)
                return LookupOutcome(False, None, -1.0, 0, shard_idx)
            sims = shard.centroids[:occ] @ qv
            best = int(np.argmax(sims))
            score = float(sims[best])
            if score > self.tau_hit:
                shard.tick += 1
                shard.ticks[best] = shard.tick
                self._count(hit=True)
                return LookupOutcome(True, int(shard.node_ids[best]), score, occ, shard_idx)
        self._count(hit=False)
        return LookupOutcome(False, None, score, occ, shard_idx)

    def insert(self, session_id: str, vector, node_id: int) -> None:
        """Cache a node centroid; INT8 inputs are dequantized to FP32 first."""
        if isinstance(vector, QuantizedVector):
            vec = kernels.dequantize(vector)
        else:
            vec = kernels.as_fp32_vector(vector, self.dim)
        shard = self._shards[route(session_id, self.shard_count)]
        with shard.lock:
            shard.tick += 1
            occ = shard.occupancy
            existing = np.flatnonzero(shard.node_ids[:occ] == np.uint64(node_id))
            if existing.size:
                slot = int(existing[0])
            elif occ < SHARD_CAPACITY:
                slot = occ
                shard.occupancy = occ + 1
            else:
                slot = int(np.argmin(shard.ticks[:occ]))
            shard.centroids[slot] = vec
            shard.node_ids[slot] = node_id
            shard.ticks[slot] = shard.tick

    def invalidate(self, session_id: str, node_id: int) -> None:
        """Drop a stale entry (e.g. its node was tombstoned underneath us)."""
        shard = self._shards[route(session_id, self.shard_count)]
        with shard.lock:
            occ = shard.occupancy
            keep = np.flatnonzero(shard.node_ids[:occ] != np.uint64(node_id))
            if keep.size == occ:
                return
            k = keep.size
            shard.centroids[:k] = shard.centroids[keep]
            shard.node_ids[:k] = shard.node_ids[keep]
            shard.ticks[:k] = shard.ticks[keep]
            shard.occupancy = k

    def shard_occupancy(self, shard_idx: int) -> int:
        return self._shards[shard_idx].occupancy

    def shard_node_ids(self, shard_idx: int) -> list[int]:
        shard = self._shards[shard_idx]
        with shard.lock:
            return [int(i) for i in shard.node_ids[: shard.occupancy]]

    def _count(self, hit: bool) -> None:
        with self._stats_lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    def note_stale_hit(self) -> None:
        """Reclassify the last hit as a miss (node turned out tombstoned)."""
        with self._stats_lock:
            self.hits -= 1
            self.misses += 1

    def hit_rate_report(self) -> dict:
        total = self.hits + self.misses
        return {
            "hits": self.hits,
            "misses": self.misses,
            "rate": (self.hits / total) if total else 0.0,
        }

    def reset_counters(self) -> None:
        with self._stats_lock:
            self.hits = 0
            self.misses = 0
