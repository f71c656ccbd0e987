import threading

import numpy as np
import pytest

from aeon import compaction
from aeon.compaction import assert_no_loops_in_locked_sections
from aeon.errors import StorageError
from aeon.kernels import normalize
from aeon.trace import KIND_USER
from tests.conftest import random_matrix


@pytest.fixture(autouse=True)
def clear_hook():
    yield
    compaction.step2_hook = None


def fill(eng, rng, n, dim):
    vecs = random_matrix(rng, n, dim)
    ids = [eng.insert(v) for v in vecs]
    return vecs, ids


class TestCompactBasics:
    def test_empty_compact(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        stats = eng.compact()
        assert stats.nodes_copied == 0
        assert eng.atlas.gf.generation == 2
        assert eng.wal.replay({}) == (0, 0)

    def test_live_set_preserved_dead_reclaimed(self, tmpdir_engine):
        eng = tmpdir_engine(dim=48, sync=False)
        rng = np.random.default_rng(0)
        vecs, ids = fill(eng, rng, 1000, 48)
        dead = set(int(i) for i in rng.choice(ids, size=400, replace=False))
        for nid in dead:
            eng.tombstone(nid)
        stats = eng.compact()
        assert stats.nodes_copied == 600
        assert set(eng.atlas.id_to_slot) == set(ids) - dead
        v = eng.atlas.views()
        assert not (v.flags[:600] & 1).any()  # no tombstones carried over

    def test_flat_scan_equivalence_across_compaction(self, tmpdir_engine):
        eng = tmpdir_engine(dim=48, sync=False)
        rng = np.random.default_rng(1)
        vecs, ids = fill(eng, rng, 2000, 48)
        for nid in rng.choice(ids, size=800, replace=False):
            eng.tombstone(int(nid))
        queries = random_matrix(rng, 200, 48)
        before = [(eng.flat_scan(q).node_id, round(eng.flat_scan(q).similarity, 5))
                  for q in queries]
        eng.compact()
        after = [(eng.flat_scan(q).node_id, round(eng.flat_scan(q).similarity, 5))
                 for q in queries]
        assert before == after

    def test_vector_payloads_identical_after_compaction(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(2)
        vecs, ids = fill(eng, rng, 300, 32)
        eng.compact()
        for nid, v in zip(ids, vecs):
            np.testing.assert_array_equal(eng.atlas.vector_fp32(nid), v)

    def test_wal_replays_to_zero_after_compact(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(3)
        fill(eng, rng, 50, 32)
        eng.append_event(KIND_USER, b"evt", normalize(rng.standard_normal(32)))
        eng.compact()
        assert eng.wal.size() == 0
        assert eng.wal.replay({}) == (0, 0)

    def test_second_compaction_gen3(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(4)
        fill(eng, rng, 10, 32)
        eng.compact()
        fill(eng, rng, 10, 32)
        eng.compact()
        assert eng.atlas.gf.generation == 3
        assert eng.atlas.node_count == 20


class TestLockedSections:
    def test_freeze_and_swap_ops_node_count_independent(self, tmpdir_engine):
        rng = np.random.default_rng(5)
        ops = []
        for n in (100, 3000):
            eng = tmpdir_engine(dim=32, sync=False)
            fill(eng, rng, n, 32)
            stats = eng.compact()
            ops.append((stats.freeze_ops, stats.swap_ops, stats.catchup_ops))
        assert ops[0] == ops[1]
        assert ops[0][2] == 0  # quiescent foreground: no catch-up work

    def test_no_loops_in_locked_sections(self):
        assert_no_loops_in_locked_sections()

    def test_freeze_window_probe(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(12)
        fill(eng, rng, 50, 32)
        probe = compaction.freeze_window_probe(eng)
        assert probe["freeze_ops"] > 0 and probe["swap_ops"] > 0
        assert probe["catchup_ops"] == 0
        assert probe["freeze_duration_s"] < 0.05  # constant work, not per-node

    def test_swap_exchanges_generation_handles(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(6)
        fill(eng, rng, 20, 32)
        old_atlas, old_trace = eng.atlas, eng.trace
        eng.compact()
        assert eng.atlas is not old_atlas
        assert eng.trace is not old_trace
        assert eng.atlas.gf.generation == old_atlas.gf.generation + 1


class TestConcurrentWrites:
    def test_inserts_during_copy_stay_in_fresh_delta(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(7)
        vecs, ids = fill(eng, rng, 200, 32)
        late_vec = normalize(rng.standard_normal(32))
        late = {}

        def hook(e):
            late["id"] = e.insert(late_vec)

        compaction.step2_hook = hook
        stats = eng.compact()
        assert stats.nodes_copied == 200  # late insert NOT folded into gen N+1
        assert eng.atlas.delta.count == 1
        assert eng.query(late_vec).node_id == late["id"]
        # the fresh record survived the WAL rewrite
        assert eng.wal.size() > 0
        applied, torn = eng.wal.replay({})
        assert (applied, torn) == (1, 0)

    def test_tombstones_during_copy_reapplied_at_swap(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(8)
        vecs, ids = fill(eng, rng, 300, 32)

        def hook(e):
            e.tombstone(ids[0])
            e.tombstone(ids[123])

        compaction.step2_hook = hook
        stats = eng.compact()
        assert stats.catchup_ops >= 2
        assert not eng.atlas.is_live(ids[0])
        assert not eng.atlas.is_live(ids[123])
        assert eng.flat_scan(vecs[0]).node_id != ids[0]

    def test_trace_appends_during_copy_caught_up(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(9)
        for i in range(50):
            eng.append_event(KIND_USER, b"old %d" % i, normalize(rng.standard_normal(32)))
        fresh = {}

        def hook(e):
            fresh["id"] = e.append_event(KIND_USER, b"fresh event text",
                                         normalize(rng.standard_normal(32)))

        compaction.step2_hook = hook
        eng.compact()
        assert eng.trace.event_count == 51
        ev = eng.read_event(fresh["id"])
        with eng.read_blob(ev.blob_ref) as blob:
            assert bytes(blob.data) == b"fresh event text"
        assert eng.get_recent(1)[0].event_id == fresh["id"]

    def test_readers_survive_concurrent_compaction(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(10)
        vecs, ids = fill(eng, rng, 2000, 32)
        eng.compact()
        stop = threading.Event()
        errors = []

        def reader():
            r = np.random.default_rng(threading.get_ident() % 2**32)
            while not stop.is_set():
                i = int(r.integers(0, len(vecs)))
                try:
                    res = eng.query(vecs[i])
                    if res.similarity < -1.001:
                        errors.append("bogus similarity")
                except Exception as exc:  # any error at all is a failure
                    errors.append(repr(exc))

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for t in threads:
            t.start()
        for _ in range(3):
            eng.compact()
        stop.set()
        for t in threads:
            t.join()
        assert errors == []

    def test_concurrent_compactions_rejected(self, tmpdir_engine):
        eng = tmpdir_engine(dim=32, sync=False)
        hold = threading.Event()
        release = threading.Event()

        def hook(e):
            hold.set()
            release.wait(timeout=5)

        compaction.step2_hook = hook
        t = threading.Thread(target=eng.compact)
        t.start()
        hold.wait(timeout=5)
        with pytest.raises(StorageError, match="in flight"):
            eng.compact()
        release.set()
        t.join()


class TestAbort:
    def test_failed_copy_leaves_old_generation_authoritative(self, tmpdir_engine,
                                                             monkeypatch):
        eng = tmpdir_engine(dim=32, sync=False)
        rng = np.random.default_rng(11)
        vecs, ids = fill(eng, rng, 100, 32)
        wal_before = eng.wal.size()
        real = eng.trace.gc_copy_live
        blown = []

        def boom(*a, **kw):
            if not blown:
                blown.append(True)
                raise OSError("disk full (injected)")
            return real(*a, **kw)

        monkeypatch.setattr(eng.trace, "gc_copy_live", boom)
        with pytest.raises(OSError, match="injected"):
            eng.compact()
        assert eng.atlas.gf.generation == 1
        assert eng.wal.size() == wal_before
        assert eng.atlas.frozen_delta is None
        # every node still queryable; engine accepts new writes
        assert eng.flat_scan(vecs[3]).node_id == ids[3]
        eng.insert(normalize(rng.standard_normal(32)))
        stats = eng.compact()
        assert stats.nodes_copied == 101
