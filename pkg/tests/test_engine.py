import os
import signal
import struct
import subprocess
import sys
import time

import numpy as np
import pytest

from aeon import MemoryEngine, QUANT_INT8
from aeon.errors import StorageError
from aeon.kernels import normalize
from aeon.trace import KIND_USER
from tests.conftest import random_matrix


class TestReopen:
    def test_replay_restores_delta_state(self, tmp_path):
        d = str(tmp_path / "ix")
        eng = MemoryEngine.create(d, dim=32, sync=False)
        rng = np.random.default_rng(0)
        vecs = random_matrix(rng, 40, 32)
        ids = [eng.insert(v) for v in vecs]
        eid = eng.append_event(KIND_USER, b"survives the restart", vecs[0])
        eng.tombstone(ids[3])
        eng.close()

        eng2 = MemoryEngine.open(d, sync=False)
        assert set(eng2.atlas.delta.id_to_slot) == set(ids)
        assert not eng2.atlas.is_live(ids[3])
        assert eng2.flat_scan(vecs[7]).node_id == ids[7]
        assert eng2.read_event(eid).preview == b"survives the restart"
        assert eng2.next_node_id == max(ids) + 1
        new_id = eng2.insert(normalize(rng.standard_normal(32)))
        assert new_id == max(ids) + 1
        eng2.close()

    def test_reopen_after_compaction_replays_nothing(self, tmp_path):
        d = str(tmp_path / "ix")
        eng = MemoryEngine.create(d, dim=32, sync=False)
        rng = np.random.default_rng(1)
        vecs = random_matrix(rng, 30, 32)
        ids = [eng.insert(v) for v in vecs]
        eng.compact()
        eng.close()
        eng2 = MemoryEngine.open(d, sync=False)
        assert eng2.atlas.node_count == 30
        assert eng2.atlas.delta.count == 0
        assert eng2.query(vecs[5]).node_id == ids[5]
        eng2.close()

    def test_unsealed_generation_discarded_on_open(self, tmp_path):
        d = str(tmp_path / "ix")
        eng = MemoryEngine.create(d, dim=32, sync=False)
        rng = np.random.default_rng(2)
        ids = [eng.insert(v) for v in random_matrix(rng, 10, 32)]
        eng.compact()
        eng.close()
        # fake a crashed compaction: an unsealed gen3 file
        fake = os.path.join(d, "atlas_gen3.bin")
        with open(fake, "wb") as f:
            f.write(b"AEON" + struct.pack("<IIIQ", 1, 3, 0, 0).ljust(4092, b"\0"))
        eng2 = MemoryEngine.open(d, sync=False)
        assert eng2.atlas.gf.generation == 2
        assert not os.path.exists(fake)
        assert eng2.atlas.node_count == 10
        eng2.close()

    def test_open_requires_existing_index(self, tmp_path):
        with pytest.raises(StorageError):
            MemoryEngine.open(str(tmp_path))

    def test_create_refuses_existing_index(self, tmp_path):
        d = str(tmp_path / "ix")
        MemoryEngine.create(d, dim=16, sync=False).close()
        with pytest.raises(StorageError):
            MemoryEngine.create(d, dim=16)

    def test_int8_roundtrip_through_reopen(self, tmp_path):
        d = str(tmp_path / "ix")
        eng = MemoryEngine.create(d, dim=64, quant=QUANT_INT8, sync=False)
        rng = np.random.default_rng(3)
        vecs = random_matrix(rng, 100, 64)
        ids = [eng.insert(v) for v in vecs]
        eng.compact()
        eng.close()
        eng2 = MemoryEngine.open(d, sync=False)
        for i in (0, 50, 99):
            r = eng2.query(vecs[i])
            assert r.node_id == ids[i]
            assert r.similarity > 0.98
        eng2.close()


CHILD_SRC = r"""
import sys, numpy as np
from aeon import MemoryEngine
from aeon.kernels import normalize
d = sys.argv[1]
import os
if os.path.exists(os.path.join(d, "aeon.wal")):
    eng = MemoryEngine.open(d)
else:
    eng = MemoryEngine.create(d, dim=48)
rng = np.random.default_rng(int(sys.argv[2]))
print("ready", flush=True)
while True:
    eng.insert(normalize(rng.standard_normal(48)))
"""


class TestCrashRecovery:
    def test_kill9_mid_insert_recovers_prefix(self, tmp_path):
        d = str(tmp_path / "ix")
        for round_no in range(3):
            proc = subprocess.Popen([sys.executable, "-c", CHILD_SRC, d, str(round_no)],
                                    stdout=subprocess.PIPE)
            proc.stdout.readline()  # wait until the engine is open
            time.sleep(0.15)
            proc.send_signal(signal.SIGKILL)
            proc.wait()
            eng = MemoryEngine.open(d)
            ids = sorted(eng.atlas.id_to_slot) + sorted(eng.atlas.delta.id_to_slot)
            ids = sorted(set(ids))
            # prefix durability: ids are exactly 1..n with no holes
            assert ids == list(range(1, len(ids) + 1))
            assert len(ids) > 0
            # spot-check integrity: stored vectors still normalized
            for nid in ids[:: max(1, len(ids) // 10)]:
                v = eng.atlas.vector_fp32(nid)
                assert abs(np.linalg.norm(v) - 1.0) < 1e-3
            eng.close()

    def test_wal_disabled_engine_loses_uncompacted_but_works(self, tmp_path):
        d = str(tmp_path / "ix")
        eng = MemoryEngine.create(d, dim=32, wal_enabled=False)
        rng = np.random.default_rng(4)
        vecs = random_matrix(rng, 20, 32)
        ids = [eng.insert(v) for v in vecs]
        assert eng.query(vecs[0]).node_id == ids[0]
        eng.compact()
        eng.close()
        eng2 = MemoryEngine.open(d, wal_enabled=False)
        assert eng2.atlas.node_count == 20
        eng2.close()
