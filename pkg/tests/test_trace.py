import numpy as np
import pytest

from aeon.errors import InvalidArgumentError, NotFoundError
from aeon.kernels import normalize
from aeon.trace import BLOCK_SIZE, EVENT_SIZE, KIND_CONCEPT, KIND_SYSTEM, KIND_USER
from tests.conftest import random_matrix


def topical_embeddings(rng, n, dim, topics_every=256, spread=0.25):
    """Blocks of consecutive events share a topic (temporal locality)."""
    out = np.empty((n, dim), dtype=np.float32)
    topic = None
    for i in range(n):
        if i % topics_every == 0:
            topic = rng.standard_normal(dim)
            topic /= np.linalg.norm(topic)
        v = topic + spread / np.sqrt(dim) * rng.standard_normal(dim)
        out[i] = v / np.linalg.norm(v)
    return out


class TestAppend:
    def test_first_event_shape(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(0)
        emb = normalize(rng.standard_normal(32))
        eid = eng.append_event(KIND_USER, b"first words", emb)
        assert eid == 1
        ev = eng.read_event(eid)
        assert ev.prev_id == 0 and ev.next_id == 0
        assert eng.trace.block_count() == 1
        assert eng.trace._block_counts[0] == 1
        np.testing.assert_allclose(eng.trace.block_centroid(0), emb, atol=1e-6)

    def test_record_is_512_bytes_and_chained(self, tmpdir_engine):
        eng = tmpdir_engine(dim=16, sync=False)
        rng = np.random.default_rng(1)
        ids = [eng.append_event(KIND_SYSTEM, f"text {i}".encode(),
                                normalize(rng.standard_normal(16)))
               for i in range(5)]
        assert eng.trace.ev.used_bytes == 4096 + 5 * EVENT_SIZE
        for i, eid in enumerate(ids):
            ev = eng.read_event(eid)
            assert ev.prev_id == (ids[i - 1] if i else 0)
            assert ev.next_id == (ids[i + 1] if i + 1 < 5 else 0)

    def test_preview_boundary_63_bytes(self, tmpdir_engine):
        eng = tmpdir_engine(dim=16, sync=False)
        rng = np.random.default_rng(2)
        text = b"x" * 63
        eid = eng.append_event(KIND_USER, text, normalize(rng.standard_normal(16)))
        ev = eng.read_event(eid)
        assert ev.blob_ref.size == 63
        assert ev.preview == text

    def test_preview_is_blob_prefix(self, tmpdir_engine):
        eng = tmpdir_engine(dim=16, sync=False)
        rng = np.random.default_rng(3)
        for text in (b"short", b"y" * 200, b"z" * 63, b""):
            eid = eng.append_event(KIND_CONCEPT, text, normalize(rng.standard_normal(16)))
            ev = eng.read_event(eid)
            with eng.read_blob(ev.blob_ref) as blob:
                assert bytes(blob.data).startswith(ev.preview)
                assert bytes(blob.data) == text

    def test_refs_capacity(self, tmpdir_engine):
        eng = tmpdir_engine(dim=16, sync=False)
        rng = np.random.default_rng(4)
        emb = normalize(rng.standard_normal(16))
        eid = eng.append_event(KIND_USER, b"t", emb, ref_ids=range(1, 17))
        assert eng.read_event(eid).ref_ids == tuple(range(1, 17))
        with pytest.raises(InvalidArgumentError):
            eng.append_event(KIND_USER, b"t", emb, ref_ids=range(17))

    def test_centroids_match_batch_oracle(self, tmpdir_engine):
        eng = tmpdir_engine(dim=24, sync=False)
        rng = np.random.default_rng(5)
        embs = topical_embeddings(rng, 2048, 24)
        for i, e in enumerate(embs):
            eng.append_event(KIND_USER, b"e%d" % i, e)
        t = eng.trace
        assert t.block_count() == 2
        assert t._block_counts == [BLOCK_SIZE, BLOCK_SIZE]
        for b in range(2):
            batch = embs[b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE].astype(np.float64)
            mean = batch.mean(axis=0)
            oracle = (mean / np.linalg.norm(mean)).astype(np.float32)
            np.testing.assert_allclose(t.block_centroid(b), oracle, atol=1e-4)


class TestSearch:
    def test_single_block_equals_full_scan(self, tmpdir_engine):
        eng = tmpdir_engine(dim=24, sync=False)
        rng = np.random.default_rng(6)
        embs = random_matrix(rng, 200, 24)
        ids = [eng.append_event(KIND_USER, b"x", e) for e in embs]
        q = normalize(rng.standard_normal(24))
        results, comps = eng.trace_search(q, k_blocks=1, top_n=5)
        sims = embs @ q
        oracle = [ids[i] for i in np.argsort(-sims)[:5]]
        assert [eid for eid, _ in results] == oracle
        assert comps == 1 + 200

    def test_comparison_count_formula(self, tmpdir_engine):
        eng = tmpdir_engine(dim=16, sync=False)
        rng = np.random.default_rng(7)
        n = 3000
        embs = topical_embeddings(rng, n, 16)
        for e in embs:
            eng.append_event(KIND_USER, b"", e)
        nblocks = -(-n // BLOCK_SIZE)
        q = normalize(rng.standard_normal(16))
        _, comps = eng.trace_search(q, k_blocks=2, top_n=3)
        assert comps <= nblocks + 2 * BLOCK_SIZE
        # with nothing tombstoned the phase-2 term is exactly the block sizes
        assert comps >= nblocks + BLOCK_SIZE + (n - 2 * BLOCK_SIZE)

    def test_empty_trace(self, tmpdir_engine):
        eng = tmpdir_engine(dim=16)
        q = normalize(np.ones(16))
        assert eng.trace_search(q, 1, 5) == ([], 0)

    def test_clustered_top1_agreement(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(8)
        n = 4096
        embs = topical_embeddings(rng, n, 32, topics_every=1024, spread=0.2)
        ids = [eng.append_event(KIND_USER, b"", e) for e in embs]
        agree = 0
        trials = 100
        for _ in range(trials):
            i = int(rng.integers(0, n))
            g = rng.standard_normal(32)
            q = embs[i] + 0.05 * g / np.linalg.norm(g)
            q = (q / np.linalg.norm(q)).astype(np.float32)
            two_phase, _ = eng.trace_search(q, k_blocks=3, top_n=1)
            full = ids[int(np.argmax(embs @ q))]
            agree += two_phase[0][0] == full
        assert agree / trials >= 0.95


class TestTombstoneAndGc:
    def _fill(self, eng, rng, n=300, dim=24):
        embs = topical_embeddings(rng, n, dim)
        ids = [eng.append_event(KIND_USER, b"payload %d" % i, e)
               for i, e in enumerate(embs)]
        return embs, ids

    def test_tombstone_hides_from_search(self, tmpdir_engine):
        eng = tmpdir_engine(dim=24, sync=False)
        rng = np.random.default_rng(9)
        embs, ids = self._fill(eng, rng)
        target = ids[42]
        results, _ = eng.trace_search(embs[42], k_blocks=1, top_n=1)
        assert results[0][0] == target
        eng.tombstone_event(target)
        results, _ = eng.trace_search(embs[42], k_blocks=1, top_n=1)
        assert results[0][0] != target
        assert eng.trace.block_live_count(0) == len(ids) - 1

    def test_tombstone_unknown(self, tmpdir_engine):
        eng = tmpdir_engine(dim=24)
        with pytest.raises(NotFoundError):
            eng.tombstone_event(999)

    def test_gc_noop_when_nothing_dead(self, tmpdir_engine):
        eng = tmpdir_engine(dim=24, sync=False)
        rng = np.random.default_rng(10)
        embs, ids = self._fill(eng, rng)
        blob_bytes = eng.trace.blobs.used_bytes
        eng.compact()
        assert eng.trace.event_count == len(ids)
        assert eng.trace.blobs.used_bytes == blob_bytes
        assert eng.trace.ev.generation == 2

    def test_gc_retains_exactly_live(self, tmpdir_engine):
        eng = tmpdir_engine(dim=24, sync=False)
        rng = np.random.default_rng(11)
        embs, ids = self._fill(eng, rng, n=400)
        dead = set(int(i) for i in rng.choice(ids, size=200, replace=False))
        for eid in dead:
            eng.tombstone_event(eid)
        eng.compact()
        assert eng.trace.event_count == 200
        assert set(eng.trace.id_to_slot) == set(ids) - dead

    def test_post_gc_search_equals_live_restriction(self, tmpdir_engine):
        eng = tmpdir_engine(dim=24, sync=False)
        rng = np.random.default_rng(12)
        embs, ids = self._fill(eng, rng, n=500)
        for eid in ids[::3]:
            eng.tombstone_event(eid)
        queries = random_matrix(rng, 30, 24)
        before = [eng.trace_search(q, k_blocks=1, top_n=5)[0] for q in queries]
        eng.compact()
        after = [eng.trace_search(q, k_blocks=1, top_n=5)[0] for q in queries]
        assert before == after

    def test_gc_relinks_chain_and_preserves_blobs(self, tmpdir_engine):
        eng = tmpdir_engine(dim=24, sync=False)
        rng = np.random.default_rng(13)
        embs, ids = self._fill(eng, rng, n=50)
        for eid in ids[10:40]:
            eng.tombstone_event(eid)
        eng.compact()
        recent = eng.get_recent(100)
        assert [e.event_id for e in recent] == ids[40:][::-1] + ids[:10][::-1]
        for e in recent:
            with eng.read_blob(e.blob_ref) as blob:
                assert bytes(blob.data) == b"payload %d" % (e.event_id - 1)


class TestListing:
    def test_get_recent_counts(self, tmpdir_engine):
        eng = tmpdir_engine(dim=16, sync=False)
        rng = np.random.default_rng(14)
        ids = [eng.append_event(KIND_USER, b"m", normalize(rng.standard_normal(16)))
               for _ in range(10)]
        assert eng.get_recent(0) == []
        assert [e.event_id for e in eng.get_recent(3)] == ids[-3:][::-1]
        assert len(eng.get_recent(50)) == 10

    def test_listing_never_touches_blobs(self, tmpdir_engine):
        eng = tmpdir_engine(dim=16, sync=False)
        rng = np.random.default_rng(15)
        for i in range(20):
            eng.append_event(KIND_USER, b"long text " * 30,
                             normalize(rng.standard_normal(16)))
        eng.trace.blobs.reads = 0
        views = eng.get_recent(20)
        assert len(views) == 20
        assert eng.trace.blobs.reads == 0
