"""Append-only write-ahead log with record checksums and decoupled locking.

Every append runs a fixed 3-step protocol:

  1. serialize: payload staging and CRC, with no lock held;
  2. log flush: under the log lock only, the 16-byte header and payload are
     written to the file and fdatasync'd;
  3. apply: the log lock is released, then the apply callback runs under the
     delta lock only.

The log lock and the delta lock are never held together (locks.py counts
violations), so readers and writers of the in-memory delta are never stuck
behind a disk flush.

Record layout (little-endian, no padding between records):

  magic   u8   0xA7
  type    u8   1=AtlasInsert 2=TraceAppend 3=Tombstone
  reserved u16 zero
  payload_len u32
  crc32   u32  checksum over the payload bytes
  sequence u32 strictly increasing within a log
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import Callable

from .errors import DurabilityError, InvalidArgumentError, StorageError
from .locks import TrackedLock, declare_conflict

MAGIC = 0xA7
HEADER = struct.Struct("<BBHIII")
HEADER_SIZE = 16
MAX_PAYLOAD = 16 * 1024 * 1024

ATLAS_INSERT = 1
TRACE_APPEND = 2
TOMBSTONE = 3
_KNOWN_TYPES = (ATLAS_INSERT, TRACE_APPEND, TOMBSTONE)

LOG_LOCK = "wal-log"
DELTA_LOCK = "delta"
declare_conflict(LOG_LOCK, DELTA_LOCK)


def checksum(payload) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


class WriteAheadLog:
    def __init__(self, path: str, delta_lock: TrackedLock | None = None, sync: bool = True):
        self.path = path
        self.log_lock = TrackedLock(LOG_LOCK)
        self.delta_lock = delta_lock if delta_lock is not None else TrackedLock(DELTA_LOCK)
        self.sync = sync
        self._seq = 0
        try:
            self._fd = os.open(path, os.O_CREAT | os.O_RDWR)
            os.lseek(self._fd, 0, os.SEEK_END)
        except OSError as e:
            raise StorageError(f"cannot open wal {path}: {e}") from e

    # -- append path -------------------------------------------------------

    def append(self, record_type: int, payload: bytes, apply: Callable[[int], None]) -> int:
        """Run the 3-step protocol; returns the record's sequence number.

        If the disk barrier fails the apply callback is NOT invoked; the
        record may still exist in the log, which replay-time idempotence
        must tolerate.
        """
        if record_type not in _KNOWN_TYPES:
            raise InvalidArgumentError(f"unknown record type {record_type}")
        if len(payload) > MAX_PAYLOAD:
            raise InvalidArgumentError(f"payload {len(payload)} exceeds {MAX_PAYLOAD}")

        # Step 1 - serialize (no lock). The sequence number is the one header
        # field that must be ordered with the file, so the 16-byte pack happens
        # under the log lock; the payload work (checksum) all happens here.
        crc = checksum(payload)

        # Step 2 - log flush (log lock only)
        self.log_lock.acquire()
        try:
            self._seq += 1
            seq = self._seq
            header = HEADER.pack(MAGIC, record_type, 0, len(payload), crc, seq)
            try:
                os.write(self._fd, header + payload)
                if self.sync:
                    os.fdatasync(self._fd)
            except OSError as e:
                raise DurabilityError(f"wal flush failed: {e}") from e
        finally:
            self.log_lock.release()

        # Step 3 - apply to RAM (delta lock only)
        with self.delta_lock:
            apply(seq)
        return seq

    # -- recovery ------------------------------------------------------------

    def replay(self, handlers: dict[int, Callable[[bytes, int], None]]) -> tuple[int, int]:
        """Dispatch every valid record in order; discard the torn tail.

        Returns (records_applied, torn_bytes_discarded). The file is truncated
        back to the last valid record boundary and the sequence counter
        resumes after the highest sequence seen.
        """
        size = os.fstat(self._fd).st_size
        applied = 0
        pos = 0
        last_seq = 0
        os.lseek(self._fd, 0, os.SEEK_SET)
        data = os.read(self._fd, size)
        while pos + HEADER_SIZE <= size:
            magic, rtype, _res, plen, crc, seq = HEADER.unpack_from(data, pos)
            if magic != MAGIC or rtype not in _KNOWN_TYPES or plen > MAX_PAYLOAD:
                break
            if pos + HEADER_SIZE + plen > size:
                break
            payload = data[pos + HEADER_SIZE: pos + HEADER_SIZE + plen]
            if checksum(payload) != crc:
                break
            handler = handlers.get(rtype)
            if handler is not None:
                handler(payload, seq)
            applied += 1
            last_seq = seq
            pos += HEADER_SIZE + plen
        torn = size - pos
        if torn:
            os.ftruncate(self._fd, pos)
        os.lseek(self._fd, 0, os.SEEK_END)
        self._seq = max(self._seq, last_seq)
        return applied, torn

    # -- maintenance -----------------------------------------------------------

    def truncate(self) -> None:
        """Reset the log to length 0 (post-compaction); sequences keep counting."""
        with self.log_lock:
            try:
                os.ftruncate(self._fd, 0)
                os.lseek(self._fd, 0, os.SEEK_SET)
                if self.sync:
                    os.fdatasync(self._fd)
            except OSError as e:
                raise DurabilityError(f"wal truncate failed: {e}") from e

    def truncate_through(self, boundary_seq: int) -> None:
        """Drop records with sequence <= boundary_seq, keeping the fresh tail.

        Used after compaction: the frozen-delta records are durably folded into
        the new generation file, but inserts that arrived during the background
        copy live only in the log and must survive. Rewrites via rename so a
        crash leaves either the full old log or the valid new tail.
        """
        with self.log_lock:
            size = os.fstat(self._fd).st_size
            os.lseek(self._fd, 0, os.SEEK_SET)
            data = os.read(self._fd, size)
            pos = 0
            suffix_start = size
            while pos + HEADER_SIZE <= size:
                magic, rtype, _res, plen, crc, seq = HEADER.unpack_from(data, pos)
                if magic != MAGIC or rtype not in _KNOWN_TYPES or plen > MAX_PAYLOAD:
                    break
                if pos + HEADER_SIZE + plen > size:
                    break
                if seq > boundary_seq:
                    suffix_start = pos
                    break
                pos += HEADER_SIZE + plen
            else:
                suffix_start = pos
            suffix = data[suffix_start:] if suffix_start < size else b""
            tmp = self.path + ".rewrite"
            try:
                tmp_fd = os.open(tmp, os.O_CREAT | os.O_TRUNC | os.O_WRONLY)
                os.write(tmp_fd, suffix)
                if self.sync:
                    os.fdatasync(tmp_fd)
                os.close(tmp_fd)
                os.rename(tmp, self.path)
                new_fd = os.open(self.path, os.O_RDWR)
                os.lseek(new_fd, 0, os.SEEK_END)
            except OSError as e:
                raise DurabilityError(f"wal rewrite failed: {e}") from e
            os.close(self._fd)
            self._fd = new_fd

    @property
    def sequence(self) -> int:
        return self._seq

    def size(self) -> int:
        return os.fstat(self._fd).st_size

    def close(self) -> None:
        os.close(self._fd)
