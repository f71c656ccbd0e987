"""Engine facade: one directory holding an index, a trace, a WAL, and a cache.

Layout on disk (all little-endian, each file self-describing via its header):

    atlas_gen<N>.bin        index nodes (see atlas.py)
    trace_gen<N>.bin        512-byte trace events
    trace_embed_gen<N>.bin  event embeddings, one D*4-byte slot per event
    trace_blobs_gen<N>.bin  variable-length text arena
    aeon.wal                write-ahead log

Writers (insert / tombstone / append_event) are serialized by a single writer
mutex; readers run lock-free against the generation files under epoch guards
and are never blocked by WAL flushes. Opening a directory picks the highest
sealed generation of each family, deletes unsealed leftovers from a crashed
compaction, and replays the WAL (idempotent by id) on top.
"""

from __future__ import annotations

import os
import re
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import atlas as atlas_mod
from . import compaction, kernels, trace as trace_mod, wal as wal_mod
from .atlas import Atlas, SearchResult
from .blobs import BlobRef
from .errors import InvalidArgumentError, NotFoundError, StorageError
from .locks import TrackedLock
from .slb import SemanticCache
from .storage import EpochManager
from .trace import Trace
from .wal import WriteAheadLog

WAL_FILENAME = "aeon.wal"

DOMAIN_ATLAS = 1
DOMAIN_TRACE = 2
_TOMBSTONE_PAYLOAD = struct.Struct("<B7xQ")


@dataclass
class BlobView:
    """Zero-copy blob text; holds an epoch guard for the view's lifetime."""

    data: memoryview
    _guard: object

    def release(self) -> None:
        self.data.release()
        self._guard.release()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()
        return False

    @property
    def text(self) -> str:
        return bytes(self.data).decode("utf-8", errors="replace")


@dataclass
class LookupResult:
    node_id: int
    similarity: float
    source: str  # "slb" or "atlas"
    comparisons: int


def _generations(directory: str, pattern: str) -> dict[int, str]:
    rx = re.compile(pattern)
    out = {}
    for name in os.listdir(directory):
        m = rx.fullmatch(name)
        if m:
            out[int(m.group(1))] = os.path.join(directory, name)
    return out


class MemoryEngine:
    def __init__(self, directory: str, *, wal_enabled: bool = True, sync: bool = True,
                 tau_hit: float = 0.90, max_reader_threads: int = 64):
        self.directory = directory
        self.ebr = EpochManager(max_threads=max_reader_threads)
        self.delta_lock = TrackedLock(wal_mod.DELTA_LOCK)
        self._writer_lock = threading.Lock()
        self._compaction_gate = threading.Lock()
        self._compaction_active = False
        self._pending_node_tombstones: list[int] = []
        self._pending_event_tombstones: list[int] = []
        self._pending_trace_appends: list[int] = []
        self.wal_enabled = wal_enabled
        self.sync = sync
        self.tau_hit = tau_hit
        self.atlas: Atlas | None = None
        self.trace: Trace | None = None
        self.wal: WriteAheadLog | None = None
        self.slb: SemanticCache | None = None
        self.next_node_id = 1
        self.last_compaction_stats = None
        self._closed = False

    # -- lifecycle -------------------------------------------------------------

    @classmethod
    def create(cls, directory: str, dim: int, quant: int = atlas_mod.QUANT_FP32, *,
               meta_size: int = atlas_mod.DEFAULT_META, wal_enabled: bool = True,
               sync: bool = True, tau_hit: float = 0.90,
               initial_slots: int = atlas_mod.INITIAL_SLOTS) -> "MemoryEngine":
        os.makedirs(directory, exist_ok=True)
        if _generations(directory, r"atlas_gen(\d+)\.bin"):
            raise StorageError(f"{directory} already holds an index")
        eng = cls(directory, wal_enabled=wal_enabled, sync=sync, tau_hit=tau_hit)
        eng.atlas = Atlas.create(directory, dim, quant, eng.ebr, meta_size=meta_size,
                                 delta_lock=eng.delta_lock, initial_slots=initial_slots)
        eng.atlas.gf.seal()
        eng.trace = Trace.create(directory, dim, eng.ebr, eng.delta_lock)
        eng.trace.seal()
        if wal_enabled:
            eng.wal = WriteAheadLog(os.path.join(directory, WAL_FILENAME),
                                    delta_lock=eng.delta_lock, sync=sync)
        eng.slb = SemanticCache(dim, tau_hit=tau_hit)
        return eng

    @classmethod
    def open(cls, directory: str, *, wal_enabled: bool = True, sync: bool = True,
             tau_hit: float = 0.90) -> "MemoryEngine":
        eng = cls(directory, wal_enabled=wal_enabled, sync=sync, tau_hit=tau_hit)
        atlas_path = eng._pick_generation(r"atlas_gen(\d+)\.bin", atlas_mod.MAGIC)
        if atlas_path is None:
            raise StorageError(f"{directory} holds no sealed index generation")
        eng.atlas = Atlas.open(atlas_path, eng.ebr, delta_lock=eng.delta_lock)
        trace_path = eng._pick_generation(r"trace_gen(\d+)\.bin", trace_mod.EVENT_MAGIC,
                                          companions=("trace_embed_gen{g}.bin",
                                                      "trace_blobs_gen{g}.bin"))
        if trace_path is None:
            raise StorageError(f"{directory} holds no sealed trace generation")
        gen = int(re.search(r"trace_gen(\d+)\.bin$", trace_path).group(1))
        eng.trace = Trace.open(directory, gen, eng.ebr, eng.delta_lock)
        if wal_enabled:
            eng.wal = WriteAheadLog(os.path.join(directory, WAL_FILENAME),
                                    delta_lock=eng.delta_lock, sync=sync)
            eng.wal.replay({
                wal_mod.ATLAS_INSERT: eng._replay_insert,
                wal_mod.TRACE_APPEND: eng._replay_trace_append,
                wal_mod.TOMBSTONE: eng._replay_tombstone,
            })
        ids = list(eng.atlas.id_to_slot) + list(eng.atlas.delta.id_to_slot)
        eng.next_node_id = max(ids) + 1 if ids else 1
        eng.slb = SemanticCache(eng.atlas.dim, tau_hit=tau_hit)
        return eng

    def _pick_generation(self, pattern: str, magic: bytes,
                         companions: tuple[str, ...] = ()) -> str | None:
        """Highest sealed generation wins; stale and unsealed files are removed."""
        gens = _generations(self.directory, pattern)
        sealed = []
        for g, path in gens.items():
            ok = _is_sealed(path, magic)
            for tpl in companions:
                cpath = os.path.join(self.directory, tpl.format(g=g))
                ok = ok and os.path.exists(cpath) and _is_sealed_any(cpath)
            if ok:
                sealed.append(g)
        if not sealed:
            return None
        best = max(sealed)
        for g, path in gens.items():
            if g != best:
                _unlink_quiet(path)
                for tpl in companions:
                    _unlink_quiet(os.path.join(self.directory, tpl.format(g=g)))
        return gens[best]

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self.wal:
            self.wal.close()
        self.atlas.gf.close()
        self.trace.ev.close()
        self.trace.em.close()
        self.trace.blobs.gf.close()
        self.ebr.drain()

    # -- WAL replay handlers ------------------------------------------------------

    def _replay_insert(self, payload: bytes, seq: int) -> None:
        node_id = struct.unpack_from("<Q", payload, 0)[0]
        if node_id in self.atlas.id_to_slot:
            return  # already folded into a sealed generation
        self.atlas.delta.append_record(payload, seq)

    def _replay_trace_append(self, payload: bytes, seq: int) -> None:
        rec = payload[:trace_mod.EVENT_SIZE]
        emb_len = self.trace.dim * 4
        emb = payload[trace_mod.EVENT_SIZE:trace_mod.EVENT_SIZE + emb_len]
        blob = payload[trace_mod.EVENT_SIZE + emb_len:]
        self.trace.apply_append(rec, emb, blob)

    def _replay_tombstone(self, payload: bytes, seq: int) -> None:
        domain, target = _TOMBSTONE_PAYLOAD.unpack(payload)
        try:
            if domain == DOMAIN_ATLAS:
                self.atlas.tombstone_apply(target, seq)
            else:
                self.trace.apply_tombstone(target)
        except NotFoundError:
            pass  # target already compacted away; replay stays idempotent

    # -- writes --------------------------------------------------------------------

    def _require_normalized(self, v) -> np.ndarray:
        arr = kernels.as_fp32_vector(v, self.atlas.dim)
        if not kernels.is_normalized(arr):
            raise InvalidArgumentError("vector must be L2-normalized (|norm - 1| <= 1e-4)")
        return arr

    def insert(self, vector, meta: bytes = b"") -> int:
        """Quantize (if INT8), WAL-log, and place the node in the delta buffer."""
        with self._writer_lock:
            arr = self._require_normalized(vector)
            node_id = self.next_node_id
            record = self.atlas.serialize_node(node_id, arr, meta)
            if self.wal_enabled:
                self.wal.append(wal_mod.ATLAS_INSERT, record,
                                lambda seq: self.atlas.delta_apply(record, seq))
            else:
                with self.delta_lock:
                    self.atlas.delta_apply(record, 0)
            self.next_node_id = node_id + 1
            return node_id

    def tombstone(self, node_id: int) -> None:
        with self._writer_lock:
            if not self.atlas.contains(node_id):
                raise NotFoundError(node_id)

            def apply(seq: int) -> None:
                self.atlas.tombstone_apply(node_id, seq)
                if self._compaction_active:
                    self._pending_node_tombstones.append(node_id)

            if self.wal_enabled:
                self.wal.append(wal_mod.TOMBSTONE,
                                _TOMBSTONE_PAYLOAD.pack(DOMAIN_ATLAS, node_id), apply)
            else:
                with self.delta_lock:
                    apply(0)

    def append_event(self, kind: int, text: bytes | str, embedding, ref_ids=()) -> int:
        if isinstance(text, str):
            text = text.encode("utf-8")
        with self._writer_lock:
            emb = kernels.as_fp32_vector(embedding, self.trace.dim)
            if not kernels.is_normalized(emb):
                raise InvalidArgumentError("event embedding must be L2-normalized")
            event_id = self.trace.last_event_id + 1
            record = self.trace.build_record(event_id, kind, text, ref_ids)
            payload = record + emb.tobytes() + text

            def apply(seq: int) -> None:
                self.trace.apply_append(record, emb.tobytes(), text)
                if self._compaction_active:
                    self._pending_trace_appends.append(event_id)

            if self.wal_enabled:
                self.wal.append(wal_mod.TRACE_APPEND, payload, apply)
            else:
                with self.delta_lock:
                    apply(0)
            return event_id

    def tombstone_event(self, event_id: int) -> None:
        with self._writer_lock:
            if event_id not in self.trace.id_to_slot:
                raise NotFoundError(event_id)

            def apply(seq: int) -> None:
                self.trace.apply_tombstone(event_id)
                if self._compaction_active:
                    self._pending_event_tombstones.append(event_id)

            if self.wal_enabled:
                self.wal.append(wal_mod.TOMBSTONE,
                                _TOMBSTONE_PAYLOAD.pack(DOMAIN_TRACE, event_id), apply)
            else:
                with self.delta_lock:
                    apply(0)

    # -- reads ------------------------------------------------------------------------

    def query(self, q, width: int = 1, use_csls: bool = False) -> SearchResult:
        with self.ebr.pin():
            atlas = self.atlas
            if width == 1 and not use_csls:
                return atlas.query_greedy(q)
            return atlas.query_beam(q, width, use_csls)

    def flat_scan(self, q) -> SearchResult:
        with self.ebr.pin():
            return self.atlas.flat_scan(q)

    def lookup(self, session_id: str, q) -> LookupResult:
        """SLB-first lookup with tombstone revalidation and miss fill."""
        with self.ebr.pin():
            atlas = self.atlas
            outcome = self.slb.lookup(session_id, q)
            if outcome.hit:
                if atlas.is_live(outcome.node_id):
                    return LookupResult(outcome.node_id, outcome.score, "slb",
                                        outcome.comparisons)
                self.slb.invalidate(session_id, outcome.node_id)
                self.slb.note_stale_hit()
            result = atlas.query_greedy(q)
            self.slb.insert(session_id, atlas.vector_fp32(result.node_id), result.node_id)
            return LookupResult(result.node_id, result.similarity, "atlas",
                                result.comparisons)

    def trace_search(self, q, k_blocks: int = 3, top_n: int = 10):
        with self.ebr.pin():
            return self.trace.search(q, k_blocks, top_n)

    def get_recent(self, n: int):
        with self.ebr.pin():
            return self.trace.get_recent(n)

    def read_event(self, event_id: int):
        with self.ebr.pin():
            return self.trace.read_event(event_id)

    def read_blob(self, ref: BlobRef) -> BlobView:
        """Zero-copy view of a blob; caller releases (or uses `with`)."""
        guard = self.ebr.pin()
        try:
            view = self.trace.blobs.read_blob(ref)
        except Exception:
            guard.release()
            raise
        return BlobView(view, guard)

    def read_event_text(self, event_id: int) -> BlobView:
        with self.ebr.pin():
            ev = self.trace.read_event(event_id)
        return self.read_blob(ev.blob_ref)

    def node_vector_view(self, node_id: int):
        """Read-only vector view plus its guard; no payload bytes are copied."""
        guard = self.ebr.pin()
        try:
            arr = self.atlas.vector_view(node_id)
        except Exception:
            guard.release()
            raise
        return arr, guard

    # -- maintenance --------------------------------------------------------------------

    def compact(self) -> compaction.CompactionStats:
        return compaction.run_compaction(self)

    def stats(self) -> dict:
        a = self.atlas.stats()
        return {
            "node_count": a.node_count,
            "live_count": a.live_count,
            "depth": a.depth,
            "file_bytes": a.file_bytes,
            "delta_bytes": a.delta_bytes,
            "delta_count": a.delta_count,
            "atlas_generation": self.atlas.gf.generation,
            "event_count": self.trace.event_count,
            "event_live": self.trace.live_count,
            "trace_generation": self.trace.ev.generation,
            "blob_bytes": self.trace.blobs.used_bytes,
            "wal_bytes": self.wal.size() if self.wal else 0,
            "slb": self.slb.hit_rate_report(),
            "dim": self.atlas.dim,
            "quant": self.atlas.quant,
            "stride": self.atlas.stride,
        }


def _is_sealed(path: str, magic: bytes) -> bool:
    try:
        with open(path, "rb") as f:
            hdr = f.read(24)
        return len(hdr) >= 24 and hdr[:4] == magic and \
            struct.unpack_from("<I", hdr, 12)[0] == 1
    except OSError:
        return False


def _is_sealed_any(path: str) -> bool:
    try:
        with open(path, "rb") as f:
            hdr = f.read(24)
        return len(hdr) >= 24 and struct.unpack_from("<I", hdr, 12)[0] == 1
    except OSError:
        return False


def _unlink_quiet(path: str) -> None:
    try:
        os.unlink(path)
    except OSError:
        pass
