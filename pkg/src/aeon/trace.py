"""Episodic event log: fixed 512-byte records, block-indexed semantic search.

Events chain temporally (prev/next ids) and reference index nodes (up to 16
ref ids). Full text lives in the sidecar blob arena; the record keeps a
63-byte inline preview on its own cache line so listing never touches blobs.
Event embeddings live in a parallel arena file (a 768-dim FP32 vector cannot
fit a 512-byte record), slot-aligned with the event file.

Search is two-phase over blocks of 1024 events: score every block centroid,
then exhaustively score live events inside the top-K blocks. Block membership
is append order, which makes phase 1 a time-window selector. Each block keeps
the running sum of member embeddings; its centroid is the normalized mean, so
the incremental value equals a from-scratch recomputation.

Record layout (512 bytes, little-endian):

    event_id   u64 @0      kind u32 @8       flags u32 @12 (bit0 tombstone)
    timestamp  u64 @16     prev_id u64 @24   next_id u64 @32
    blob_offset u64 @40    blob_size u32 @48 blob_generation u32 @52
    reserved       @56     ref_ids 16 x u64 @64
    text_preview 64B @192 (cache-line aligned)   reserved @256..512
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import kernels
from .blobs import BlobArena, BlobRef
from .errors import InvalidArgumentError, NotFoundError, StorageError
from .locks import TrackedLock
from .storage import HEADER_SIZE, EpochManager, GenerationFile

EVENT_MAGIC = b"AEOT"
EMBED_MAGIC = b"AEOE"

EVENT_SIZE = 512
BLOCK_SIZE = 1024
MAX_REFS = 16
PREVIEW_BYTES = 64

KIND_USER = 1
KIND_SYSTEM = 2
KIND_CONCEPT = 3

FLAG_TOMBSTONE = 1

# family fields after the common prefix: dim, event_count, last_event_id
_EV_FAMILY = struct.Struct("<IQQ")
_EM_FAMILY = struct.Struct("<IQ")
_FAMILY_OFF = 24

_EV_HDR = struct.Struct("<QIIQQQQII")  # id, kind, flags, ts, prev, next, boff, bsize, bgen


def event_path(directory: str, generation: int) -> str:
    return f"{directory}/trace_gen{generation}.bin"


def embed_path(directory: str, generation: int) -> str:
    return f"{directory}/trace_embed_gen{generation}.bin"


@dataclass
class EventView:
    event_id: int
    kind: int
    timestamp: int
    prev_id: int
    next_id: int
    ref_ids: tuple[int, ...]
    blob_ref: BlobRef
    preview: bytes
    tombstoned: bool


@dataclass
class TraceGcStats:
    events_before: int
    events_after: int
    blob_bytes_before: int
    blob_bytes_after: int

    @property
    def retain_ratio(self) -> float:
        return self.events_after / self.events_before if self.events_before else 1.0


def _event_views(buf, count: int, base: int):
    if count <= 0:
        z = np.zeros
        return SimpleNamespace(ids=z(0, "<u8"), kinds=z(0, "<u4"), flags=z(0, "<u4"),
                               ts=z(0, "<u8"), prev=z(0, "<u8"), nxt=z(0, "<u8"))
    def view(dt, off):
        return np.ndarray((count,), dt, buffer=buf, offset=base + off, strides=(EVENT_SIZE,))
    return SimpleNamespace(ids=view("<u8", 0), kinds=view("<u4", 8), flags=view("<u4", 12),
                           ts=view("<u8", 16), prev=view("<u8", 24), nxt=view("<u8", 32))


class Trace:
    def __init__(self, ev: GenerationFile, em: GenerationFile, blobs: BlobArena,
                 dim: int, lock: TrackedLock):
        self.ev = ev
        self.em = em
        self.blobs = blobs
        self.dim = dim
        self.lock = lock
        self.event_count = 0
        self.last_event_id = 0
        self.id_to_slot: dict[int, int] = {}
        self.live_count = 0
        # block index (RAM, rebuilt on open): running sums keep centroids exact
        self._block_sums = np.zeros((0, dim), dtype=np.float64)
        self._block_counts: list[int] = []
        self._block_live: list[int] = []
        self._centroids = np.zeros((0, dim), dtype=np.float32)

    # -- construction ----------------------------------------------------------

    @classmethod
    def create(cls, directory: str, dim: int, ebr: EpochManager, lock: TrackedLock,
               generation: int = 1) -> "Trace":
        ev = GenerationFile.create(event_path(directory, generation),
                                   HEADER_SIZE + EVENT_SIZE * 1024, EVENT_MAGIC, ebr,
                                   generation)
        em = GenerationFile.create(embed_path(directory, generation),
                                   HEADER_SIZE + dim * 4 * 1024, EMBED_MAGIC, ebr,
                                   generation)
        blobs = BlobArena.create(directory, ebr, generation)
        t = cls(ev, em, blobs, dim, lock)
        t._write_family()
        return t

    @classmethod
    def open(cls, directory: str, generation: int, ebr: EpochManager,
             lock: TrackedLock) -> "Trace":
        ev = GenerationFile.open(event_path(directory, generation), EVENT_MAGIC, ebr)
        dim, count, last_id = _EV_FAMILY.unpack_from(ev.map, _FAMILY_OFF)
        em = GenerationFile.open(embed_path(directory, generation), EMBED_MAGIC, ebr)
        em_dim, em_count = _EM_FAMILY.unpack_from(em.map, _FAMILY_OFF)
        if em_dim != dim:
            raise StorageError(f"trace embed file dim {em_dim} != event file dim {dim}")
        if em_count != count:
            # crash between the two header writes; embedding bytes are written
            # before either header, so the event count is authoritative
            if HEADER_SIZE + count * dim * 4 > em.capacity_bytes:
                raise StorageError(
                    f"trace embed file too small for {count} events")
            _EM_FAMILY.pack_into(em.map, _FAMILY_OFF, dim, count)
        from .blobs import arena_path
        blobs = BlobArena.open(arena_path(directory, generation), ebr)
        t = cls(ev, em, blobs, dim, lock)
        t.event_count = count
        t.last_event_id = last_id
        v = t.views()
        t.id_to_slot = {int(i): s for s, i in enumerate(v.ids[:count])}
        t.live_count = int(count - np.count_nonzero(v.flags[:count] & FLAG_TOMBSTONE))
        t._rebuild_blocks()
        return t

    def _write_family(self) -> None:
        _EV_FAMILY.pack_into(self.ev.map, _FAMILY_OFF, self.dim, self.event_count,
                             self.last_event_id)
        _EM_FAMILY.pack_into(self.em.map, _FAMILY_OFF, self.dim, self.event_count)

    # -- views --------------------------------------------------------------------

    def views(self):
        return _event_views(self.ev.map, self.event_count, HEADER_SIZE)

    def embeddings(self, count: int | None = None) -> np.ndarray:
        n = self.event_count if count is None else count
        if n == 0:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.ndarray((n, self.dim), "<f4", buffer=self.em.map, offset=HEADER_SIZE,
                          strides=(self.dim * 4, 4))

    def block_count(self) -> int:
        return len(self._block_counts)

    def block_centroid(self, b: int) -> np.ndarray:
        return self._centroids[b]

    def block_live_count(self, b: int) -> int:
        return self._block_live[b]

    def chain_tail(self) -> int:
        """Event id of the newest record (0 when empty); records are in time order."""
        if self.event_count == 0:
            return 0
        return int(self.views().ids[self.event_count - 1])

    # -- record building -------------------------------------------------------------

    def build_record(self, event_id: int, kind: int, text: bytes, ref_ids,
                     timestamp: int | None = None) -> bytes:
        if kind not in (KIND_USER, KIND_SYSTEM, KIND_CONCEPT):
            raise InvalidArgumentError(f"unknown event kind {kind}")
        refs = tuple(int(r) for r in ref_ids)
        if len(refs) > MAX_REFS:
            raise InvalidArgumentError(f"{len(refs)} refs exceed the {MAX_REFS} slot table")
        ts = int(time.time() * 1e6) if timestamp is None else timestamp
        buf = bytearray(EVENT_SIZE)
        prev_id = self.chain_tail()  # 0 when this is the first event
        _EV_HDR.pack_into(buf, 0, event_id, kind, 0, ts, prev_id, 0, 0, 0, 0)
        for i, r in enumerate(refs):
            struct.pack_into("<Q", buf, 64 + 8 * i, r)
        preview = text[: PREVIEW_BYTES - 1]
        buf[192:192 + len(preview)] = preview
        return bytes(buf)

    # -- WAL apply path -----------------------------------------------------------------

    def apply_append(self, record: bytes, embedding_bytes: bytes, blob_bytes: bytes) -> int:
        """Write one event to the files; called under the delta lock.

        Blob bytes are re-appended here (the WAL payload embeds them) and the
        record's blob ref is patched in, so replay is self-contained.
        """
        event_id = struct.unpack_from("<Q", record, 0)[0]
        if event_id in self.id_to_slot:
            return self.id_to_slot[event_id]  # replay idempotence
        ref = self.blobs.append_blob(blob_bytes)
        rec = bytearray(record)
        struct.pack_into("<QII", rec, 40, ref.offset, ref.size, ref.generation)
        slot = self.event_count
        if self.ev.remaining() < EVENT_SIZE:
            self.ev.grow(self.ev.used_bytes + EVENT_SIZE)
        if self.em.remaining() < self.dim * 4:
            self.em.grow(self.em.used_bytes + self.dim * 4)
        off = HEADER_SIZE + slot * EVENT_SIZE
        self.ev.map[off:off + EVENT_SIZE] = rec
        self.ev.used_bytes = off + EVENT_SIZE
        eoff = HEADER_SIZE + slot * self.dim * 4
        self.em.map[eoff:eoff + self.dim * 4] = embedding_bytes
        self.em.used_bytes = eoff + self.dim * 4
        if slot > 0:
            prev_off = HEADER_SIZE + (slot - 1) * EVENT_SIZE
            struct.pack_into("<Q", self.ev.map, prev_off + 32, event_id)
        self.event_count = slot + 1
        self.last_event_id = max(self.last_event_id, event_id)
        self.id_to_slot[event_id] = slot
        self.live_count += 1
        emb = np.frombuffer(embedding_bytes, dtype="<f4")
        self._block_add(slot, emb)
        self._write_family()
        return slot

    def _block_add(self, slot: int, emb: np.ndarray) -> None:
        b = slot // BLOCK_SIZE
        if b >= len(self._block_counts):
            self._block_counts.append(0)
            self._block_live.append(0)
            self._block_sums = np.vstack([self._block_sums, np.zeros((1, self.dim))])
            self._centroids = np.vstack(
                [self._centroids, np.zeros((1, self.dim), dtype=np.float32)])
        self._block_sums[b] += emb.astype(np.float64)
        self._block_counts[b] += 1
        self._block_live[b] += 1
        norm = np.linalg.norm(self._block_sums[b])
        if norm > 0:
            self._centroids[b] = (self._block_sums[b] / norm).astype(np.float32)

    def apply_tombstone(self, event_id: int) -> None:
        slot = self.id_to_slot.get(event_id)
        if slot is None:
            raise NotFoundError(event_id)
        off = HEADER_SIZE + slot * EVENT_SIZE + 12
        flags = struct.unpack_from("<I", self.ev.map, off)[0]
        if not flags & FLAG_TOMBSTONE:
            struct.pack_into("<I", self.ev.map, off, flags | FLAG_TOMBSTONE)
            self.live_count -= 1
            self._block_live[slot // BLOCK_SIZE] -= 1

    def _rebuild_blocks(self) -> None:
        n = self.event_count
        nblocks = (n + BLOCK_SIZE - 1) // BLOCK_SIZE
        self._block_sums = np.zeros((nblocks, self.dim), dtype=np.float64)
        self._block_counts = []
        self._block_live = []
        self._centroids = np.zeros((nblocks, self.dim), dtype=np.float32)
        if n == 0:
            return
        emb = self.embeddings()
        flags = self.views().flags[:n]
        for b in range(nblocks):
            lo, hi = b * BLOCK_SIZE, min((b + 1) * BLOCK_SIZE, n)
            self._block_sums[b] = emb[lo:hi].astype(np.float64).sum(axis=0)
            self._block_counts.append(hi - lo)
            self._block_live.append(
                int((hi - lo) - np.count_nonzero(flags[lo:hi] & FLAG_TOMBSTONE)))
            norm = np.linalg.norm(self._block_sums[b])
            if norm > 0:
                self._centroids[b] = (self._block_sums[b] / norm).astype(np.float32)

    # -- queries ----------------------------------------------------------------------------

    def search(self, q, k_blocks: int, top_n: int = 10) -> tuple[list[tuple[int, float]], int]:
        """Two-phase scan; returns (ranked (event_id, sim) pairs, comparisons)."""
        nblocks = len(self._block_counts)
        if nblocks == 0:
            return [], 0
        if not 1 <= k_blocks <= nblocks:
            k_blocks = min(max(k_blocks, 1), nblocks)
        qv = kernels.as_fp32_vector(q, self.dim)
        comparisons = nblocks
        block_sims = self._centroids @ qv
        top_blocks = np.argsort(-block_sims)[:k_blocks]
        emb = self.embeddings()
        flags = self.views().flags[: self.event_count]
        ids = self.views().ids[: self.event_count]
        candidates: list[tuple[float, int]] = []
        for b in top_blocks:
            lo, hi = b * BLOCK_SIZE, min((b + 1) * BLOCK_SIZE, self.event_count)
            live = np.flatnonzero((flags[lo:hi] & FLAG_TOMBSTONE) == 0)
            if live.size == 0:
                continue
            comparisons += live.size
            sims = emb[lo:hi][live] @ qv
            for i, s in zip(live, sims):
                candidates.append((float(s), int(ids[lo + i])))
        candidates.sort(key=lambda t: (-t[0], t[1]))
        return [(eid, sim) for sim, eid in candidates[:top_n]], comparisons

    def get_recent(self, n: int) -> list[EventView]:
        """Walk the temporal chain backwards; touches only the 512-byte records."""
        out: list[EventView] = []
        if n <= 0 or self.event_count == 0:
            return out
        eid = self.chain_tail()
        while eid and len(out) < n:
            slot = self.id_to_slot.get(eid)
            if slot is None:
                break
            view = self.read_event_slot(slot)
            if not view.tombstoned:
                out.append(view)
            eid = view.prev_id
        return out

    def read_event_slot(self, slot: int) -> EventView:
        off = HEADER_SIZE + slot * EVENT_SIZE
        (eid, kind, flags, ts, prev, nxt, boff, bsize, bgen) = _EV_HDR.unpack_from(
            self.ev.map, off)
        refs = struct.unpack_from("<16Q", self.ev.map, off + 64)
        preview = bytes(self.ev.map[off + 192: off + 192 + PREVIEW_BYTES])
        preview = preview[: bsize] if bsize < PREVIEW_BYTES else preview[: PREVIEW_BYTES - 1]
        return EventView(eid, kind, ts, prev, nxt,
                         tuple(r for r in refs if r), BlobRef(boff, bsize, bgen),
                         preview, bool(flags & FLAG_TOMBSTONE))

    def read_event(self, event_id: int) -> EventView:
        slot = self.id_to_slot.get(event_id)
        if slot is None:
            raise NotFoundError(event_id)
        return self.read_event_slot(slot)

    def is_live(self, event_id: int) -> bool:
        slot = self.id_to_slot.get(event_id)
        if slot is None:
            return False
        flags = struct.unpack_from("<I", self.ev.map, HEADER_SIZE + slot * EVENT_SIZE + 12)[0]
        return not flags & FLAG_TOMBSTONE

    # -- generational GC ------------------------------------------------------------------------

    def gc_copy_live(self, directory: str, ebr: EpochManager) -> tuple["Trace", TraceGcStats]:
        """Copy live events, embeddings, and referenced blobs to generation N+1.

        Returns the new (unsealed) trace; the caller seals, swaps, and retires
        the old generation after the hot swap. The temporal chain is relinked
        across survivors and block centroids are rebuilt from scratch.
        """
        new_gen = self.ev.generation + 1
        v = self.views()
        n = self.event_count
        live_slots = (np.flatnonzero((v.flags[:n] & FLAG_TOMBSTONE) == 0)
                      if n else np.array([], dtype=np.int64))
        live_refs = []
        for slot in live_slots:
            off = HEADER_SIZE + int(slot) * EVENT_SIZE
            boff, bsize, _bgen = struct.unpack_from("<QII", self.ev.map, off + 40)
            live_refs.append(BlobRef(boff, bsize, self.blobs.generation))
        new_blobs, remap = self.blobs.gc_copy_live(live_refs)

        ev = GenerationFile.create(event_path(directory, new_gen),
                                   HEADER_SIZE + EVENT_SIZE * max(1024, len(live_slots)),
                                   EVENT_MAGIC, ebr, new_gen)
        em = GenerationFile.create(embed_path(directory, new_gen),
                                   HEADER_SIZE + self.dim * 4 * max(1024, len(live_slots)),
                                   EMBED_MAGIC, ebr, new_gen)
        new = Trace(ev, em, new_blobs, self.dim, self.lock)
        emb = self.embeddings()
        prev_id = 0
        for out_slot, slot in enumerate(live_slots):
            slot = int(slot)
            off = HEADER_SIZE + slot * EVENT_SIZE
            rec = bytearray(self.ev.map[off:off + EVENT_SIZE])
            boff, bsize, _bgen = struct.unpack_from("<QII", rec, 40)
            nref = remap[(boff, bsize)]
            struct.pack_into("<QII", rec, 40, nref.offset, nref.size, nref.generation)
            struct.pack_into("<Q", rec, 24, prev_id)   # relink chain over survivors
            struct.pack_into("<Q", rec, 32, 0)
            eid = struct.unpack_from("<Q", rec, 0)[0]
            if out_slot > 0:
                poff = HEADER_SIZE + (out_slot - 1) * EVENT_SIZE
                struct.pack_into("<Q", ev.map, poff + 32, eid)
            noff = HEADER_SIZE + out_slot * EVENT_SIZE
            ev.map[noff:noff + EVENT_SIZE] = rec
            eoff = HEADER_SIZE + out_slot * self.dim * 4
            em.map[eoff:eoff + self.dim * 4] = emb[slot].tobytes()
            new.id_to_slot[eid] = out_slot
            prev_id = eid
        new.event_count = len(live_slots)
        new.live_count = len(live_slots)
        new.last_event_id = self.last_event_id  # id counter continues across gc
        ev.used_bytes = HEADER_SIZE + new.event_count * EVENT_SIZE
        em.used_bytes = HEADER_SIZE + new.event_count * self.dim * 4
        new._write_family()
        new._rebuild_blocks()
        stats = TraceGcStats(
            events_before=n,
            events_after=new.event_count,
            blob_bytes_before=self.blobs.used_bytes - HEADER_SIZE,
            blob_bytes_after=new_blobs.used_bytes - HEADER_SIZE,
        )
        return new, stats

    def seal(self) -> None:
        self._write_family()
        self.ev.seal()
        self.em.seal()
        self.blobs.gf.seal()

    def retire(self) -> None:
        self.ev.retire()
        self.em.retire()
        self.blobs.gf.retire()
