"""Hierarchical page-clustered vector index over a generation file.

Node records are fixed-stride, self-describing via the file header:

    stride = align_up(64-byte node header + vector payload + metadata, 64)

with payload 4*D bytes (FP32) or D bytes (INT8). The first 256 bytes of the
metadata block hold the child table: 64 u32 slot indices, 0xFFFFFFFF when
unused. Fresh inserts land in a RAM delta buffer (same record layout) and are
routed into the tree only when compaction rebuilds the generation file.

Node header layout (64 bytes):

    id           u64    @0
    flags        u32    @8    bit0 tombstone, bit1 internal
    child_count  u32    @12
    parent_slot  u64    @16
    scale        f32    @24   quantization scale (1.0 for FP32)
    hub_penalty  f32    @28   mean similarity to siblings, set at compaction
    reserved            @32..64
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, NotFoundError, StorageError
from .locks import TrackedLock
from .storage import HEADER_SIZE, EpochManager, GenerationFile

MAGIC = b"AEON"

QUANT_FP32 = 0
QUANT_INT8 = 1

NODE_HEADER_BYTES = 64
CHILD_TABLE_BYTES = 256
CHILD_SENTINEL = 0xFFFFFFFF
NO_ROOT = 0xFFFFFFFFFFFFFFFF

FLAG_TOMBSTONE = 1
FLAG_INTERNAL = 2

DEFAULT_BRANCHING = 64
DEFAULT_META = 256
INITIAL_SLOTS = 4096

# family fields after the 24-byte common header prefix:
# dim, meta_size, quant, branching, node_count, root_slot, stride, depth
_FAMILY = struct.Struct("<IIIIQQQI")
_FAMILY_OFF = 24

_NODE_HDR = struct.Struct("<QIIQff")


def payload_bytes(dim: int, quant: int) -> int:
    return dim * 4 if quant == QUANT_FP32 else dim


def align_up(n: int, a: int) -> int:
    return (n + a - 1) // a * a


def node_stride(dim: int, quant: int, meta_size: int) -> int:
    return align_up(NODE_HEADER_BYTES + payload_bytes(dim, quant) + meta_size, 64)


@dataclass
class SearchResult:
    node_id: int
    similarity: float
    hops: int
    comparisons: int
    nodes_evaluated: int = 0


@dataclass
class AtlasStats:
    node_count: int
    depth: int
    live_count: int
    file_bytes: int
    delta_bytes: int
    delta_count: int


def _views(buf, capacity_slots: int, stride: int, dim: int, quant: int, base: int):
    """Strided numpy views over stride-packed node records (no copies)."""
    if capacity_slots <= 0:
        z = np.zeros
        return SimpleNamespace(
            ids=z(0, "<u8"), flags=z(0, "<u4"), child_count=z(0, "<u4"),
            parent=z(0, "<u8"), scale=z(0, "<f4"), hub=z(0, "<f4"),
            vectors=z((0, dim), "<f4" if quant == QUANT_FP32 else "i1"),
            children=z((0, DEFAULT_BRANCHING), "<u4"))
    def view(dt, off, shape=None, inner=1):
        if shape is None:
            return np.ndarray((capacity_slots,), dt, buffer=buf, offset=base + off,
                              strides=(stride,))
        return np.ndarray((capacity_slots, shape), dt, buffer=buf, offset=base + off,
                          strides=(stride, inner))
    vec_dt, vec_inner = ("<f4", 4) if quant == QUANT_FP32 else ("i1", 1)
    return SimpleNamespace(
        ids=view("<u8", 0),
        flags=view("<u4", 8),
        child_count=view("<u4", 12),
        parent=view("<u8", 16),
        scale=view("<f4", 24),
        hub=view("<f4", 28),
        vectors=view(vec_dt, NODE_HEADER_BYTES, dim, vec_inner),
        children=view("<u4", NODE_HEADER_BYTES + payload_bytes(dim, quant),
                      DEFAULT_BRANCHING, 4),
    )


def _sims_fp32(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    return rows @ q


def _sims_int8(rows: np.ndarray, scales: np.ndarray, q_values: np.ndarray,
               q_scale: np.float32) -> np.ndarray:
    # float64 matmul of int8 values is exact (products <= 127^2, sums < 2^53),
    # so this matches the int32-accumulating scalar kernel bit for bit after
    # the same f32(raw) * (node_scale * query_scale) dequantization order.
    raw = rows.astype(np.float64) @ q_values.astype(np.float64)
    return raw.astype(np.float32) * (scales * q_scale)


def _best_slot(slots: np.ndarray, sims: np.ndarray) -> tuple[int, float]:
    """Argmax with near-tie break: among equal sims the lowest slot wins."""
    top = sims.max()
    winner = int(slots[sims == top].min())
    return winner, float(top)


class DeltaBuffer:
    """Flat RAM arena of freshly inserted records, same stride as the file."""

    def __init__(self, stride: int, dim: int, quant: int, lock: TrackedLock,
                 initial_slots: int = 1024):
        self.stride = stride
        self.dim = dim
        self.quant = quant
        self.lock = lock  # the WAL apply lock; held for every mutation
        self._buf = bytearray(stride * initial_slots)
        self._capacity = initial_slots
        self.count = 0
        self.id_to_slot: dict[int, int] = {}
        self.live_count = 0
        self.last_applied_seq = 0

    def _ensure(self, extra: int) -> None:
        while self.count + extra > self._capacity:
            self._capacity *= 2
            nbuf = bytearray(self.stride * self._capacity)
            nbuf[: self.count * self.stride] = self._buf[: self.count * self.stride]
            self._buf = nbuf

    def append_record(self, record: bytes, seq: int) -> int:
        """Called under the delta lock (WAL apply path)."""
        node_id = _NODE_HDR.unpack_from(record, 0)[0]
        existing = self.id_to_slot.get(node_id)
        if existing is not None:
            # replay idempotence: insert-by-id is last-writer-wins
            off = existing * self.stride
            self._buf[off:off + self.stride] = record
            self.last_applied_seq = max(self.last_applied_seq, seq)
            return existing
        self._ensure(1)
        slot = self.count
        off = slot * self.stride
        self._buf[off:off + self.stride] = record
        self.count = slot + 1
        self.id_to_slot[node_id] = slot
        if not _NODE_HDR.unpack_from(record, 0)[1] & FLAG_TOMBSTONE:
            self.live_count += 1
        self.last_applied_seq = max(self.last_applied_seq, seq)
        return slot

    def set_tombstone(self, node_id: int) -> bool:
        slot = self.id_to_slot.get(node_id)
        if slot is None:
            return False
        off = slot * self.stride + 8
        flags = struct.unpack_from("<I", self._buf, off)[0]
        if not flags & FLAG_TOMBSTONE:
            struct.pack_into("<I", self._buf, off, flags | FLAG_TOMBSTONE)
            self.live_count -= 1
        return True

    def is_tombstoned(self, node_id: int) -> bool | None:
        slot = self.id_to_slot.get(node_id)
        if slot is None:
            return None
        flags = struct.unpack_from("<I", self._buf, slot * self.stride + 8)[0]
        return bool(flags & FLAG_TOMBSTONE)

    def views(self):
        return _views(self._buf, self.count, self.stride, self.dim, self.quant, base=0)

    def records(self) -> memoryview:
        return memoryview(self._buf)[: self.count * self.stride]

    @property
    def bytes_used(self) -> int:
        return self.count * self.stride


class Atlas:
    """The index proper: one generation file plus the current delta chain."""

    def __init__(self, gf: GenerationFile, dim: int, quant: int, meta_size: int,
                 branching: int, delta_lock: TrackedLock):
        self.gf = gf
        self.dim = dim
        self.quant = quant
        self.meta_size = meta_size
        self.branching = branching
        self.stride = node_stride(dim, quant, meta_size)
        self.delta_lock = delta_lock
        self.delta = DeltaBuffer(self.stride, dim, quant, delta_lock)
        self.frozen_delta: DeltaBuffer | None = None
        self.node_count = 0
        self.root_slot = NO_ROOT
        self.depth = 0
        self.file_live = 0
        self.id_to_slot: dict[int, int] = {}
        self._cached_map = None
        self._cached_views = None

    # -- construction --------------------------------------------------------

    @classmethod
    def create(cls, directory: str, dim: int, quant: int, ebr: EpochManager,
               meta_size: int = DEFAULT_META, branching: int = DEFAULT_BRANCHING,
               delta_lock: TrackedLock | None = None, generation: int = 1,
               initial_slots: int = INITIAL_SLOTS) -> "Atlas":
        if quant not in (QUANT_FP32, QUANT_INT8):
            raise InvalidArgumentError(f"unsupported quantization {quant}")
        if not 8 <= dim <= kernels.MAX_DIM:
            raise InvalidArgumentError(f"dimension {dim} outside [8, {kernels.MAX_DIM}]")
        if meta_size % 64 != 0 or meta_size < CHILD_TABLE_BYTES:
            raise InvalidArgumentError(
                f"metadata size must be a multiple of 64 and >= {CHILD_TABLE_BYTES}")
        if branching != DEFAULT_BRANCHING:
            raise InvalidArgumentError("branching is fixed at 64 (child table layout)")
        stride = node_stride(dim, quant, meta_size)
        path = index_path(directory, generation)
        gf = GenerationFile.create(path, HEADER_SIZE + initial_slots * stride,
                                   MAGIC, ebr, generation)
        atlas = cls(gf, dim, quant, meta_size, branching,
                    delta_lock or TrackedLock("delta"))
        atlas._write_family_header()
        return atlas

    @classmethod
    def open(cls, path: str, ebr: EpochManager,
             delta_lock: TrackedLock | None = None) -> "Atlas":
        gf = GenerationFile.open(path, MAGIC, ebr)
        dim, meta, quant, branching, count, root, stride, depth = _FAMILY.unpack_from(
            gf.map, _FAMILY_OFF)
        expect = node_stride(dim, quant, meta)
        if stride != expect:
            raise StorageError(
                f"{path}: stored stride {stride} != recomputed {expect} for "
                f"D={dim} Q={quant} M={meta}")
        atlas = cls(gf, dim, quant, meta, branching, delta_lock or TrackedLock("delta"))
        atlas.node_count = count
        atlas.root_slot = root
        atlas.depth = depth
        v = atlas.views()
        ids = v.ids[:count]
        flags = v.flags[:count]
        atlas.id_to_slot = {int(i): s for s, i in enumerate(ids)}
        atlas.file_live = int(count - np.count_nonzero(flags & FLAG_TOMBSTONE))
        return atlas

    def _write_family_header(self) -> None:
        _FAMILY.pack_into(self.gf.map, _FAMILY_OFF, self.dim, self.meta_size, self.quant,
                          self.branching, self.node_count, self.root_slot, self.stride,
                          self.depth)
        self.gf.used_bytes = HEADER_SIZE + self.node_count * self.stride
        self.gf.flush_used()

    # -- views -----------------------------------------------------------------

    def capacity_slots(self) -> int:
        return (self.gf.capacity_bytes - HEADER_SIZE) // self.stride

    def views(self):
        mm = self.gf.map
        if mm is not self._cached_map:
            self._cached_views = _views(mm, self.capacity_slots(), self.stride,
                                        self.dim, self.quant, base=HEADER_SIZE)
            self._cached_map = mm
        return self._cached_views

    # -- record serialization ------------------------------------------------------

    def serialize_node(self, node_id: int, vector: np.ndarray, meta: bytes = b"") -> bytes:
        """Encode one node record (vector quantized when the index is INT8)."""
        if len(meta) > self.meta_size - CHILD_TABLE_BYTES:
            raise InvalidArgumentError(
                f"metadata payload {len(meta)} exceeds {self.meta_size - CHILD_TABLE_BYTES}")
        buf = bytearray(self.stride)
        if self.quant == QUANT_INT8:
            qv = kernels.quantize(vector)
            scale = float(qv.scale)
            payload = qv.values.tobytes()
        else:
            scale = 1.0
            payload = np.ascontiguousarray(vector, dtype="<f4").tobytes()
        _NODE_HDR.pack_into(buf, 0, node_id, 0, 0, NO_ROOT, scale, 0.0)
        off = NODE_HEADER_BYTES
        buf[off:off + len(payload)] = payload
        off += len(payload)
        buf[off:off + CHILD_TABLE_BYTES] = b"\xff" * CHILD_TABLE_BYTES
        if meta:
            moff = off + CHILD_TABLE_BYTES
            buf[moff:moff + len(meta)] = meta
        return bytes(buf)

    # -- mutation (engine/WAL-driven) ----------------------------------------------

    def delta_apply(self, record: bytes, seq: int) -> None:
        """WAL apply callback target; runs under the delta lock."""
        self.delta.append_record(record, seq)

    def contains(self, node_id: int) -> bool:
        return (node_id in self.delta.id_to_slot
                or (self.frozen_delta is not None and node_id in self.frozen_delta.id_to_slot)
                or node_id in self.id_to_slot)

    def is_live(self, node_id: int) -> bool:
        t = self.delta.is_tombstoned(node_id)
        if t is not None:
            return not t
        if self.frozen_delta is not None:
            t = self.frozen_delta.is_tombstoned(node_id)
            if t is not None:
                return not t
        slot = self.id_to_slot.get(node_id)
        if slot is None:
            return False
        return not bool(self.views().flags[slot] & FLAG_TOMBSTONE)

    def tombstone_apply(self, node_id: int, seq: int = 0) -> None:
        """Set the tombstone flag wherever the node currently lives."""
        if self.delta.set_tombstone(node_id):
            return
        if self.frozen_delta is not None and self.frozen_delta.set_tombstone(node_id):
            return
        slot = self.id_to_slot.get(node_id)
        if slot is None:
            raise NotFoundError(node_id)
        v = self.views()
        if not v.flags[slot] & FLAG_TOMBSTONE:
            v.flags[slot] |= FLAG_TOMBSTONE
            self.file_live -= 1

    # -- query helpers ----------------------------------------------------------------

    def _prepare_query(self, q) -> tuple[np.ndarray, object]:
        arr = kernels.as_fp32_vector(q, self.dim)
        if self.quant == QUANT_INT8:
            return arr, kernels.quantize(arr)
        return arr, None

    def _score_rows(self, rows: np.ndarray, scales, q_f32: np.ndarray, q_quant):
        if self.quant == QUANT_INT8:
            return _sims_int8(rows, scales, q_quant.values, q_quant.scale)
        return _sims_fp32(rows, q_f32)

    def _scan_delta(self, delta: DeltaBuffer, q_f32, q_quant, best, live_only: bool):
        """Linear scan of one delta arena; returns (best, comparisons).

        Comparisons count the scanned occupancy for tree queries and only the
        live records for flat_scan (whose contract is live-node count).
        """
        with self.delta_lock:
            n = delta.count
            if n == 0:
                return best, 0
            v = delta.views()
            rows = v.vectors[:n]
            scales = v.scale[:n] if self.quant == QUANT_INT8 else None
            sims = self._score_rows(rows, scales, q_f32, q_quant)
            live = (v.flags[:n] & FLAG_TOMBSTONE) == 0
            if live.any():
                idx = np.flatnonzero(live)
                sub = sims[idx]
                top = int(idx[int(np.argmax(sub))])
                top_sim = float(sims[top])
                if best is None or top_sim > best[1]:
                    best = (int(v.ids[top]), top_sim)
            return best, (int(np.count_nonzero(live)) if live_only else n)

    def _delta_chain(self):
        chain = [self.delta]
        if self.frozen_delta is not None:
            chain.append(self.frozen_delta)
        return chain

    def _pair_sim(self, node_id: int, q_f32: np.ndarray, q_quant) -> float:
        """Single-pair similarity via the scalar kernel path.

        Batched scoring (BLAS) may differ in the last ulp depending on batch
        shape; returned similarities are recomputed here so the same winning
        node always reports the identical score.
        """
        if self.quant == QUANT_INT8:
            slot = self.id_to_slot.get(node_id)
            if slot is not None:
                v = self.views()
                qv = kernels.QuantizedVector(np.array(v.vectors[slot]),
                                             np.float32(v.scale[slot]))
            else:
                with self.delta_lock:
                    for delta in self._delta_chain():
                        dslot = delta.id_to_slot.get(node_id)
                        if dslot is not None:
                            dv = delta.views()
                            qv = kernels.QuantizedVector(np.array(dv.vectors[dslot]),
                                                         np.float32(dv.scale[dslot]))
                            break
                    else:
                        raise NotFoundError(node_id)
            return kernels.dot_int8(qv, q_quant)
        return float(np.dot(self.vector_fp32(node_id), q_f32))

    def total_live(self) -> int:
        n = self.file_live + self.delta.live_count
        if self.frozen_delta is not None:
            n += self.frozen_delta.live_count
        return n

    def is_empty(self) -> bool:
        return self.node_count == 0 and all(d.count == 0 for d in self._delta_chain())

    # -- queries ---------------------------------------------------------------------

    def query_greedy(self, q) -> SearchResult:
        """Greedy descent from the root plus a linear delta scan."""
        if self.is_empty():
            raise NotFoundError("index is empty")
        q_f32, q_quant = self._prepare_query(q)
        comparisons = 0
        hops = 0
        expanded = 0  # nodes whose child table was opened (nodes-per-query metric)
        best = None  # (id, sim) over live nodes only
        if self.root_slot != NO_ROOT and self.node_count:
            v = self.views()
            scales = v.scale if self.quant == QUANT_INT8 else None
            cur = int(self.root_slot)
            cur_sim = float(self._score_rows(
                v.vectors[cur:cur + 1],
                scales[cur:cur + 1] if scales is not None else None,
                q_f32, q_quant)[0])
            comparisons += 1
            if not v.flags[cur] & FLAG_TOMBSTONE:
                best = (int(v.ids[cur]), cur_sim)
            while True:
                cc = int(v.child_count[cur])
                if cc == 0:
                    break
                expanded += 1
                slots = v.children[cur, :cc].astype(np.int64)
                rows = v.vectors[slots]
                sims = self._score_rows(
                    rows, scales[slots] if scales is not None else None, q_f32, q_quant)
                comparisons += cc
                live = (v.flags[slots] & FLAG_TOMBSTONE) == 0
                if live.any():
                    lidx = np.flatnonzero(live)
                    cand, cand_sim = _best_slot(slots[lidx], sims[lidx])
                    if best is None or cand_sim > best[1]:
                        best = (int(v.ids[cand]), cand_sim)
                nxt, nxt_sim = _best_slot(slots, sims)
                if nxt_sim > cur_sim:
                    cur, cur_sim = nxt, nxt_sim
                    hops += 1
                else:
                    break
        for delta in self._delta_chain():
            best, c = self._scan_delta(delta, q_f32, q_quant, best, live_only=False)
            comparisons += c
        if best is None:
            raise NotFoundError("no live nodes")
        return SearchResult(best[0], self._pair_sim(best[0], q_f32, q_quant), hops,
                            comparisons, expanded)

    def query_beam(self, q, width: int = 1, use_csls: bool = False) -> SearchResult:
        """Beam descent; CSLS (2*sim - hub) reranks frontier selection only.

        One frontier slot is pinned to the greedy hill-climb pointer, so the
        beam always explores a superset of query_greedy's path: width=1
        without CSLS reduces exactly to query_greedy, and wider beams can
        never return a worse similarity than greedy (beam dominance). The
        remaining width-1 slots are filled by selection score; the returned
        similarity is always the raw similarity.
        """
        if width < 1:
            raise InvalidArgumentError("beam width must be >= 1")
        if self.is_empty():
            raise NotFoundError("index is empty")
        q_f32, q_quant = self._prepare_query(q)
        comparisons = 0
        expanded = 0
        hops = 0
        best = None
        if self.root_slot != NO_ROOT and self.node_count:
            v = self.views()
            scales = v.scale if self.quant == QUANT_INT8 else None

            def score(slots: np.ndarray) -> np.ndarray:
                rows = v.vectors[slots]
                return self._score_rows(
                    rows, scales[slots] if scales is not None else None, q_f32, q_quant)

            root = int(self.root_slot)
            frontier = np.array([root], dtype=np.int64)
            sims = score(frontier)
            comparisons += 1
            known_sims = {root: float(sims[0])}
            cur, cur_sim = root, float(sims[0])  # the pinned greedy pointer
            if not v.flags[root] & FLAG_TOMBSTONE:
                best = (int(v.ids[root]), float(sims[0]))
            for _ in range(self.depth + 8):  # frontier moves down a level per round
                kids: list[np.ndarray] = []
                for s in frontier:
                    cc = int(v.child_count[s])
                    if cc:
                        kids.append(v.children[s, :cc].astype(np.int64))
                expanded += len(frontier)
                if not kids:
                    break
                new = np.unique(np.concatenate(kids))
                new = new[~np.isin(new, frontier)]
                fresh = np.array([s for s in new if s not in known_sims], dtype=np.int64)
                if fresh.size:
                    fsims = score(fresh)
                    comparisons += fresh.size
                    flive = (v.flags[fresh] & FLAG_TOMBSTONE) == 0
                    for i, s in enumerate(fresh):
                        known_sims[int(s)] = float(fsims[i])
                    if flive.any():
                        lidx = np.flatnonzero(flive)
                        cand, cand_sim = _best_slot(fresh[lidx], fsims[lidx])
                        if best is None or cand_sim > best[1]:
                            best = (int(v.ids[cand]), cand_sim)
                cc_cur = int(v.child_count[cur])
                if cc_cur:
                    cur_kids = v.children[cur, :cc_cur].astype(np.int64)
                    ksims = np.array([known_sims[int(s)] for s in cur_kids],
                                     dtype=np.float32)
                    nxt, nxt_sim = _best_slot(cur_kids, ksims)
                    if nxt_sim > cur_sim:
                        cur, cur_sim = nxt, nxt_sim
                pool = np.unique(np.concatenate([frontier, new]))
                pool_sims = np.array([known_sims[int(s)] for s in pool], dtype=np.float32)
                pool_sel = 2.0 * pool_sims - v.hub[pool] if use_csls else pool_sims
                # pin the greedy pointer, then top width-1 by selection score
                # (lowest slot on ties)
                rest = pool[pool != cur]
                rest_sel = pool_sel[pool != cur]
                order = np.lexsort((rest, -rest_sel))
                chosen = np.sort(np.concatenate(
                    [np.array([cur], dtype=np.int64), rest[order[: width - 1]]]))
                if np.array_equal(chosen, np.sort(frontier)):
                    break
                frontier = chosen
                hops += 1
        for delta in self._delta_chain():
            best, c = self._scan_delta(delta, q_f32, q_quant, best, live_only=False)
            comparisons += c
        if best is None:
            raise NotFoundError("no live nodes")
        return SearchResult(best[0], self._pair_sim(best[0], q_f32, q_quant), hops,
                            comparisons, expanded)

    def flat_scan(self, q) -> SearchResult:
        """Exact argmax over every live node; the recall oracle."""
        if self.is_empty():
            raise NotFoundError("index is empty")
        q_f32, q_quant = self._prepare_query(q)
        comparisons = 0
        best = None
        if self.node_count:
            v = self.views()
            scales = v.scale if self.quant == QUANT_INT8 else None
            chunk = 8192
            for lo in range(0, self.node_count, chunk):
                hi = min(lo + chunk, self.node_count)
                sims = self._score_rows(
                    v.vectors[lo:hi], scales[lo:hi] if scales is not None else None,
                    q_f32, q_quant)
                live = (v.flags[lo:hi] & FLAG_TOMBSTONE) == 0
                comparisons += int(np.count_nonzero(live))
                if live.any():
                    idx = np.flatnonzero(live)
                    j = idx[int(np.argmax(sims[idx]))]
                    s = float(sims[j])
                    if best is None or s > best[1]:
                        best = (int(v.ids[lo + j]), s)
        for delta in self._delta_chain():
            best, c = self._scan_delta(delta, q_f32, q_quant, best, live_only=True)
            comparisons += c
        if best is None:
            raise NotFoundError("no live nodes")
        return SearchResult(best[0], self._pair_sim(best[0], q_f32, q_quant), 0, comparisons)

    # -- zero-copy access ---------------------------------------------------------

    def vector_view(self, node_id: int) -> np.ndarray:
        """Read-only view of a stored vector (no copy for file-resident nodes)."""
        slot = self.id_to_slot.get(node_id)
        if slot is not None:
            arr = self.views().vectors[slot]
        else:
            for delta in self._delta_chain():
                dslot = delta.id_to_slot.get(node_id)
                if dslot is not None:
                    arr = delta.views().vectors[dslot]
                    break
            else:
                raise NotFoundError(node_id)
        arr = arr.view()
        arr.flags.writeable = False
        return arr

    def vector_fp32(self, node_id: int) -> np.ndarray:
        """The FP32 value of a node's vector (dequantized copy for INT8)."""
        slot = self.id_to_slot.get(node_id)
        if slot is not None:
            v = self.views()
            raw, scale = v.vectors[slot], np.float32(v.scale[slot])
        else:
            for delta in self._delta_chain():
                dslot = delta.id_to_slot.get(node_id)
                if dslot is not None:
                    dv = delta.views()
                    raw, scale = dv.vectors[dslot], np.float32(dv.scale[dslot])
                    break
            else:
                raise NotFoundError(node_id)
        if self.quant == QUANT_INT8:
            return raw.astype(np.float32) * scale
        return np.array(raw, dtype=np.float32)

    def node_scale(self, node_id: int) -> float:
        slot = self.id_to_slot.get(node_id)
        if slot is not None:
            return float(self.views().scale[slot])
        for delta in self._delta_chain():
            dslot = delta.id_to_slot.get(node_id)
            if dslot is not None:
                return float(delta.views().scale[dslot])
        raise NotFoundError(node_id)

    # -- stats -----------------------------------------------------------------------

    def stats(self) -> AtlasStats:
        delta_bytes = sum(d.bytes_used for d in self._delta_chain())
        delta_count = sum(d.count for d in self._delta_chain())
        return AtlasStats(
            node_count=self.node_count + delta_count,
            depth=self.depth,
            live_count=self.total_live(),
            file_bytes=os.stat(self.gf.path).st_size,
            delta_bytes=delta_bytes,
            delta_count=delta_count,
        )


def index_path(directory: str, generation: int) -> str:
    return f"{directory}/atlas_gen{generation}.bin"


# -- bulk tree construction (compaction-time routing) -------------------------------


def build_tree(atlas: Atlas, count: int) -> int:
    """Route `count` freshly written records into a tree; returns max depth.

    Greedy attach: descend to the most similar node per level; attach as a
    child wherever a child table has room, else recurse into the most similar
    child's subtree. Slot 0 (the earliest record) is the root. Ties go to the
    lowest slot so rebuilds are deterministic.
    """
    if count == 0:
        atlas.root_slot = NO_ROOT
        atlas.depth = 0
        return 0
    v = atlas.views()
    branching = atlas.branching
    vectors = np.ascontiguousarray(v.vectors[:count])
    int8 = atlas.quant == QUANT_INT8
    scales = np.ascontiguousarray(v.scale[:count]) if int8 else None
    child_count = np.zeros(count, dtype=np.int64)
    children = np.full((count, branching), CHILD_SENTINEL, dtype=np.uint32)
    parent = np.full(count, NO_ROOT, dtype=np.uint64)
    depth = np.zeros(count, dtype=np.int32)

    if int8:
        vec64 = vectors.astype(np.float64)

    for i in range(1, count):
        if int8:
            qrow = vec64[i]
            qscale = np.float32(scales[i])
        cur = 0
        while child_count[cur] >= branching:
            slots = children[cur, :branching].astype(np.int64)
            if int8:
                raw = vec64[slots] @ qrow
                sims = raw.astype(np.float32) * (scales[slots] * qscale)
            else:
                sims = vectors[slots] @ vectors[i]
            top = sims.max()
            cur = int(slots[sims == top].min())
        children[cur, child_count[cur]] = i
        child_count[cur] += 1
        parent[i] = cur
        depth[i] = depth[cur] + 1

    v.children[:count] = children
    v.child_count[:count] = child_count.astype(np.uint32)
    v.parent[:count] = parent
    internal = child_count > 0
    v.flags[:count] = np.where(
        internal, v.flags[:count] | FLAG_INTERNAL, v.flags[:count] & ~np.uint32(FLAG_INTERNAL))
    _hub_penalties(v, count, vectors, scales, child_count, children, int8)
    atlas.root_slot = 0
    atlas.depth = int(depth.max()) if count else 0
    return atlas.depth


def _hub_penalties(v, count, vectors, scales, child_count, children, int8: bool) -> None:
    """r(n) = mean similarity between n and its siblings; 0 for root/only children."""
    hub = np.zeros(count, dtype=np.float32)
    for p in np.flatnonzero(child_count > 0):
        c = int(child_count[p])
        if c < 2:
            continue
        slots = children[p, :c].astype(np.int64)
        if int8:
            raw = vectors[slots].astype(np.float64) @ vectors[slots].astype(np.float64).T
            s = scales[slots]
            grid = raw.astype(np.float32) * (s[:, None] * s[None, :])
        else:
            grid = vectors[slots] @ vectors[slots].T
        r = (grid.sum(axis=1) - np.diag(grid)) / np.float32(c - 1)
        hub[slots] = r.astype(np.float32)
    v.hub[:count] = hub
