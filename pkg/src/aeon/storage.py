"""Memory-mapped generation files and epoch-based reclamation (EBR).

A GenerationFile is an append-grown, mmap-backed file with a 4096-byte header
and growth by capacity doubling. Growing maps the new size at a new address
and retires the old mapping through the epoch manager instead of remapping in
place, so a reader that observed a mapping under an epoch guard can keep
dereferencing it for the guard's whole lifetime.

Reclamation discipline: a retired region is freed only once the global epoch
has advanced at least two past the retirement epoch and no registered reader
is still pinned at or before it.
"""

from __future__ import annotations

import mmap
import os
import struct
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import StorageError

HEADER_SIZE = 4096
HEADER_VERSION = 1

# common header prefix: magic, version, generation, sealed, used_bytes
_HDR = struct.Struct("<4sIIIQ")

QUIESCENT = -1
_SLOT_STRIDE_BYTES = 64  # one cache line per reader slot


class EpochGuard:
    """Read-side pin. While live, nothing retired at or after entry is freed."""

    __slots__ = ("_mgr", "slot", "epoch_at_entry", "_released")

    def __init__(self, mgr: "EpochManager", slot: int, epoch: int):
        self._mgr = mgr
        self.slot = slot
        self.epoch_at_entry = epoch
        self._released = False

    def release(self) -> None:
        if not self._released:
            self._released = True
            self._mgr._unpin(self.slot)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()
        return False


@dataclass
class RetiredRegion:
    epoch_retired: int
    destroy: Callable[[], None]
    label: str = ""


class EpochManager:
    """Classic two-epoch EBR with cache-line-separated per-thread slots.

    Slots live in one int64 numpy array with a 64-byte row stride, so distinct
    readers' epoch counters never share a cache line (the layout is asserted
    by the test suite via the array's strides).
    """

    def __init__(self, max_threads: int = 64):
        self._slots = np.full((max_threads, _SLOT_STRIDE_BYTES // 8), QUIESCENT, dtype=np.int64)
        assert self._slots.strides[0] == _SLOT_STRIDE_BYTES
        self._max_threads = max_threads
        self._epoch = 0
        self._epoch_lock = threading.Lock()
        self._retired: list[RetiredRegion] = []
        self._retire_lock = threading.Lock()
        self._tls = threading.local()
        self._slot_owner: dict[int, int] = {}  # slot -> thread ident
        self.retired_count = 0
        self.reclaimed_count = 0

    # -- registration ------------------------------------------------------

    def _my_slot(self) -> int:
        slot = getattr(self._tls, "slot", None)
        if slot is not None:
            return slot
        with self._epoch_lock:
            live = {t.ident for t in threading.enumerate()}
            for s in range(self._max_threads):
                owner = self._slot_owner.get(s)
                if owner is None or owner not in live:
                    self._slot_owner[s] = threading.get_ident()
                    self._slots[s, 0] = QUIESCENT
                    self._tls.slot = s
                    return s
        raise StorageError("epoch manager out of reader slots")

    # -- read side ----------------------------------------------------------

    def pin(self) -> EpochGuard:
        slot = self._my_slot()
        depth = getattr(self._tls, "depth", 0)
        if depth == 0:
            epoch = self._epoch
            self._slots[slot, 0] = epoch
        else:
            epoch = int(self._slots[slot, 0])
        self._tls.depth = depth + 1
        return EpochGuard(self, slot, epoch)

    def _unpin(self, slot: int) -> None:
        depth = self._tls.depth - 1
        self._tls.depth = depth
        if depth == 0:
            self._slots[slot, 0] = QUIESCENT

    # -- write side ----------------------------------------------------------

    @property
    def epoch(self) -> int:
        return self._epoch

    def retire(self, destroy: Callable[[], None], label: str = "") -> None:
        """Queue a no-longer-reachable region for deferred destruction."""
        with self._retire_lock:
            self._retired.append(RetiredRegion(self._epoch, destroy, label))
            self.retired_count += 1

    def try_advance(self) -> bool:
        """Bump the global epoch if every pinned reader has reached it."""
        with self._epoch_lock:
            active = self._slots[: self._max_threads, 0]
            pinned = active[active != QUIESCENT]
            if pinned.size and int(pinned.min()) < self._epoch:
                return False
            self._epoch += 1
            return True

    def _min_active_epoch(self) -> float:
        active = self._slots[: self._max_threads, 0]
        pinned = active[active != QUIESCENT]
        return float(pinned.min()) if pinned.size else float("inf")

    def try_reclaim(self) -> int:
        """Free every region two epochs stale; best-effort and idempotent."""
        self.try_advance()
        self.try_advance()
        freed = 0
        with self._retire_lock:
            keep: list[RetiredRegion] = []
            min_active = self._min_active_epoch()
            for region in self._retired:
                ready = (
                    self._epoch >= region.epoch_retired + 2
                    and min_active > region.epoch_retired
                )
                if not ready:
                    keep.append(region)
                    continue
                try:
                    region.destroy()
                except BufferError:
                    # a reader still exports a view over this mapping; retry later
                    keep.append(region)
                    continue
                freed += 1
            self._retired = keep
            self.reclaimed_count += freed
        return freed

    def pending_regions(self) -> int:
        with self._retire_lock:
            return len(self._retired)

    def drain(self, attempts: int = 8) -> None:
        """Reclaim everything outstanding (used at shutdown, all readers gone)."""
        for _ in range(attempts):
            if self.pending_regions() == 0:
                return
            self.try_reclaim()

    def slot_layout(self) -> tuple[int, int]:
        """(row stride in bytes, base address) for layout assertions."""
        return self._slots.strides[0], self._slots.ctypes.data


class GenerationFile:
    """One mmap-backed generation with a 4096-byte header and doubling growth."""

    def __init__(self, path: str, fd: int, mm: mmap.mmap, magic: bytes,
                 generation: int, capacity: int, used: int, ebr: EpochManager):
        self.path = path
        self._fd = fd
        self.map = mm
        self.magic = magic
        self.generation = generation
        self.capacity_bytes = capacity
        self.used_bytes = used
        self._ebr = ebr
        self._closed = False

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def create(cls, path: str, initial_capacity_bytes: int, magic: bytes,
               ebr: EpochManager, generation: int = 1) -> "GenerationFile":
        if initial_capacity_bytes < HEADER_SIZE:
            raise StorageError(f"capacity must be at least one header page ({HEADER_SIZE})")
        if os.path.exists(path):
            raise StorageError(f"already exists: {path}")
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR)
            os.ftruncate(fd, initial_capacity_bytes)
            mm = mmap.mmap(fd, initial_capacity_bytes)
        except OSError as e:
            raise StorageError(f"create failed for {path}: {e}") from e
        gf = cls(path, fd, mm, magic, generation, initial_capacity_bytes, HEADER_SIZE, ebr)
        gf._write_header(sealed=0)
        return gf

    @classmethod
    def open(cls, path: str, magic: bytes, ebr: EpochManager) -> "GenerationFile":
        try:
            fd = os.open(path, os.O_RDWR)
            size = os.fstat(fd).st_size
            mm = mmap.mmap(fd, size)
        except OSError as e:
            raise StorageError(f"open failed for {path}: {e}") from e
        got_magic, version, generation, _sealed, used = _HDR.unpack_from(mm, 0)
        if got_magic != magic:
            mm.close()
            os.close(fd)
            raise StorageError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
        if version != HEADER_VERSION:
            mm.close()
            os.close(fd)
            raise StorageError(f"{path}: unsupported version {version}")
        return cls(path, fd, mm, magic, generation, size, used, ebr)

    def _write_header(self, sealed: int) -> None:
        _HDR.pack_into(self.map, 0, self.magic, HEADER_VERSION, self.generation,
                       sealed, self.used_bytes)

    @property
    def sealed(self) -> bool:
        return _HDR.unpack_from(self.map, 0)[3] == 1

    def seal(self) -> None:
        """Mark complete and force everything to stable storage."""
        self.flush_used()
        _HDR.pack_into(self.map, 0, self.magic, HEADER_VERSION, self.generation,
                       1, self.used_bytes)
        self.map.flush()
        os.fsync(self._fd)

    def flush_used(self) -> None:
        struct.pack_into("<Q", self.map, 16, self.used_bytes)

    # -- space management ------------------------------------------------------

    def remaining(self) -> int:
        return self.capacity_bytes - self.used_bytes

    def grow(self, needed_bytes: int) -> None:
        """Double capacity until the file can hold `needed_bytes` in total.

        The old mapping is retired through EBR, never unmapped in place, so
        pinned readers keep a valid view of the old (shorter) extent.
        """
        new_capacity = self.capacity_bytes
        while new_capacity < needed_bytes:
            new_capacity *= 2
        if new_capacity == self.capacity_bytes:
            return
        try:
            os.ftruncate(self._fd, new_capacity)
            new_map = mmap.mmap(self._fd, new_capacity)
        except OSError as e:
            raise StorageError(f"grow failed for {self.path}: {e}") from e
        old_map = self.map
        self.map = new_map  # atomic reference swap; new readers see the new mapping
        self.capacity_bytes = new_capacity
        self._ebr.retire(old_map.close, label=f"{self.path}@{self.generation}-map")

    def append(self, data: bytes | bytearray | memoryview) -> int:
        """Copy bytes at the cursor, growing as needed; returns the write offset."""
        n = len(data)
        if self.remaining() < n:
            self.grow(self.used_bytes + n)
        offset = self.used_bytes
        self.map[offset:offset + n] = data
        self.used_bytes = offset + n
        self.flush_used()
        return offset

    # -- teardown ---------------------------------------------------------------

    def retire(self, delete_file: bool = True) -> None:
        """Hand this generation to EBR; destroyed after the grace period."""
        if self._closed:
            return
        self._closed = True
        mm, fd, path = self.map, self._fd, self.path

        def destroy():
            mm.close()
            os.close(fd)
            if delete_file:
                try:
                    os.unlink(path)
                except FileNotFoundError:
                    pass

        self._ebr.retire(destroy, label=f"{path}@{self.generation}-file")

    def close(self) -> None:
        """Immediate close (shutdown path; caller guarantees no readers)."""
        if self._closed:
            return
        self._closed = True
        self.map.flush()
        self.map.close()
        os.close(self._fd)
