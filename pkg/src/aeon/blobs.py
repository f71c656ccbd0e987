"""Append-only sidecar arena for variable-length text, addressed by (offset, size).

Blobs are raw bytes with no per-blob header or checksum (the refs live inside
WAL-protected trace events). Reads are zero-copy views over the mapped region;
the caller is expected to hold an epoch guard for the view's lifetime.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import GoneError, InvalidArgumentError, StorageError
from .storage import HEADER_SIZE, EpochManager, GenerationFile

MAGIC = b"AEOB"
MAX_BLOB = 64 * 1024 * 1024

REF_STRUCT = struct.Struct("<QII")  # offset, size, generation
REF_SIZE = 16  # packed with 4 trailing pad bytes inside a TraceEvent


@dataclass(frozen=True)
class BlobRef:
    offset: int
    size: int
    generation: int

    def pack(self) -> bytes:
        return REF_STRUCT.pack(self.offset, self.size, self.generation)

    @classmethod
    def unpack_from(cls, buf, off: int = 0) -> "BlobRef":
        return cls(*REF_STRUCT.unpack_from(buf, off))


def arena_path(directory: str, generation: int) -> str:
    return f"{directory}/trace_blobs_gen{generation}.bin"


class BlobArena:
    def __init__(self, gf: GenerationFile):
        self.gf = gf
        self.reads = 0  # instrumentation: listing operations must not touch blobs

    @classmethod
    def create(cls, directory: str, ebr: EpochManager, generation: int = 1,
               initial_capacity: int = HEADER_SIZE * 2) -> "BlobArena":
        gf = GenerationFile.create(arena_path(directory, generation), initial_capacity,
                                   MAGIC, ebr, generation)
        return cls(gf)

    @classmethod
    def open(cls, path: str, ebr: EpochManager) -> "BlobArena":
        return cls(GenerationFile.open(path, MAGIC, ebr))

    @property
    def generation(self) -> int:
        return self.gf.generation

    @property
    def used_bytes(self) -> int:
        return self.gf.used_bytes

    def append_blob(self, data: bytes | memoryview) -> BlobRef:
        if len(data) > MAX_BLOB:
            raise InvalidArgumentError(f"blob of {len(data)} bytes exceeds {MAX_BLOB}")
        if len(data) == 0:
            return BlobRef(self.gf.used_bytes, 0, self.generation)
        offset = self.gf.append(data)
        return BlobRef(offset, len(data), self.generation)

    def read_blob(self, ref: BlobRef) -> memoryview:
        """Borrowed, immutable view over the mapped bytes; no copy is made."""
        if ref.generation != self.generation:
            raise GoneError(
                f"blob ref generation {ref.generation} retired (current {self.generation})")
        if ref.size == 0:
            return memoryview(b"")
        if ref.offset + ref.size > self.gf.used_bytes:
            raise StorageError(f"blob ref {ref} beyond used bytes {self.gf.used_bytes}")
        self.reads += 1
        return memoryview(self.gf.map)[ref.offset:ref.offset + ref.size].toreadonly()

    def gc_copy_live(self, live_refs) -> tuple["BlobArena", dict[tuple[int, int], BlobRef]]:
        """Copy exactly the live blobs into a generation N+1 arena.

        Returns the new arena (unsealed; caller seals and swaps) plus a map
        from old (offset, size) to the new ref. Retiring the old file is the
        compaction orchestrator's job, after the hot swap.
        """
        directory = self.gf.path.rsplit("/", 1)[0]
        new_gen = self.generation + 1
        total = sum(r.size for r in live_refs)
        capacity = HEADER_SIZE * 2
        while capacity < HEADER_SIZE + total:
            capacity *= 2
        arena = BlobArena.create(directory, self.gf._ebr, new_gen, capacity)
        remap: dict[tuple[int, int], BlobRef] = {}
        src = memoryview(self.gf.map)
        for ref in live_refs:
            key = (ref.offset, ref.size)
            if key in remap:
                continue
            if ref.size == 0:
                remap[key] = BlobRef(arena.gf.used_bytes, 0, new_gen)
                continue
            offset = arena.gf.append(src[ref.offset:ref.offset + ref.size])
            remap[key] = BlobRef(offset, ref.size, new_gen)
        src.release()
        return arena, remap
