import hashlib

import numpy as np
import pytest

from aeon.blobs import BlobArena, BlobRef
from aeon.errors import GoneError, InvalidArgumentError
from aeon.storage import HEADER_SIZE, EpochManager


@pytest.fixture
def arena(tmp_path):
    ebr = EpochManager(max_threads=8)
    a = BlobArena.create(str(tmp_path), ebr)
    yield a
    a.gf.close()


class TestAppendRead:
    def test_empty_blob_leaves_cursor(self, arena):
        before = arena.used_bytes
        ref = arena.append_blob(b"")
        assert ref.size == 0
        assert arena.used_bytes == before
        assert bytes(arena.read_blob(ref)) == b""

    def test_first_blob_lands_after_header(self, arena):
        ref = arena.append_blob(b"hello")
        assert ref == BlobRef(HEADER_SIZE, 5, 1)
        assert bytes(arena.read_blob(ref)) == b"hello"

    def test_read_your_writes_content_hash(self, arena):
        rng = np.random.default_rng(0)
        refs = []
        digests = []
        for _ in range(10_000):
            blob = rng.bytes(int(rng.integers(0, 200)))
            refs.append(arena.append_blob(blob))
            digests.append(hashlib.sha256(blob).digest())
        for ref, digest in zip(refs, digests):
            assert hashlib.sha256(bytes(arena.read_blob(ref))).digest() == digest

    def test_views_alias_the_mapped_bytes(self, arena):
        ref = arena.append_blob(b"zero copy or bust")
        v1 = arena.read_blob(ref)
        v2 = arena.read_blob(ref)
        a1 = np.frombuffer(v1, dtype=np.uint8).__array_interface__["data"][0]
        a2 = np.frombuffer(v2, dtype=np.uint8).__array_interface__["data"][0]
        base = np.frombuffer(arena.gf.map, dtype=np.uint8).__array_interface__["data"][0]
        assert a1 == a2 == base + ref.offset
        assert v1.readonly and v2.readonly
        v1.release()
        v2.release()

    def test_view_is_immutable(self, arena):
        ref = arena.append_blob(b"readonly")
        view = arena.read_blob(ref)
        with pytest.raises(TypeError):
            view[0] = 0
        view.release()

    def test_oversize_rejected(self, arena):
        with pytest.raises(InvalidArgumentError):
            arena.append_blob(b"x" * (64 * 1024 * 1024 + 1))

    def test_growth_by_doubling(self, arena):
        start = arena.gf.capacity_bytes
        arena.append_blob(b"x" * (start * 3))
        cap = arena.gf.capacity_bytes
        assert cap >= start * 4
        assert cap % start == 0 and (cap // start & (cap // start - 1)) == 0


class TestGc:
    def test_stale_generation_gone_error(self, arena, tmp_path):
        ref = arena.append_blob(b"old generation")
        new, remap = arena.gc_copy_live([ref])
        stale = BlobRef(ref.offset, ref.size, ref.generation)
        assert new.generation == 2
        with pytest.raises(GoneError):
            new.read_blob(stale)
        assert bytes(new.read_blob(remap[(ref.offset, ref.size)])) == b"old generation"
        new.gf.close()

    def test_gc_zero_live(self, arena):
        for i in range(10):
            arena.append_blob(b"dead" * (i + 1))
        new, remap = arena.gc_copy_live([])
        assert new.used_bytes == HEADER_SIZE
        assert remap == {}
        new.gf.close()

    def test_gc_copies_exactly_live_bytes(self, arena):
        refs = [arena.append_blob(bytes([i]) * (i + 1)) for i in range(10)]
        live = [refs[1], refs[4], refs[7]]
        new, remap = arena.gc_copy_live(live)
        assert new.used_bytes == HEADER_SIZE + sum(r.size for r in live)
        for r in live:
            assert bytes(new.read_blob(remap[(r.offset, r.size)])) == \
                bytes(arena.read_blob(r))
        new.gf.close()

    def test_gc_all_live_preserves_content(self, arena):
        rng = np.random.default_rng(1)
        refs = [arena.append_blob(rng.bytes(int(rng.integers(1, 64)))) for _ in range(200)]
        new, remap = arena.gc_copy_live(refs)
        before = sorted(bytes(arena.read_blob(r)) for r in refs)
        after = sorted(bytes(new.read_blob(remap[(r.offset, r.size)])) for r in refs)
        assert before == after
        assert new.used_bytes - HEADER_SIZE == sum(r.size for r in refs)
        new.gf.close()
