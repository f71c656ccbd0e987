#!/usr/bin/env python3
"""Regenerate the binary fixtures under frontend/fixtures/ from the engine.

Only the used prefix of each generation file is kept (the readers never look
past the counted records), so the fixtures stay a few KB. Deterministic by
seed; rerun after any byte-layout change.
"""

import os
import shutil
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "..", "src"))

from aeon import atlas as atlas_mod  # noqa: E402
from aeon.datasets import dense_forest, save_dataset  # noqa: E402
from aeon.engine import MemoryEngine  # noqa: E402
from aeon.storage import HEADER_SIZE  # noqa: E402
from aeon.trace import EVENT_SIZE  # noqa: E402

FIXDIR = os.path.join(os.path.dirname(__file__), "..", "fixtures")
DIM = 16
NODES = 20
EVENTS = 6


def copy_prefix(src: str, dst: str, used: int) -> None:
    with open(src, "rb") as f:
        data = f.read(used)
    with open(dst, "wb") as f:
        f.write(data)


def main() -> None:
    os.makedirs(FIXDIR, exist_ok=True)
    # small compaction target so the fixture index stays tiny
    atlas_mod.INITIAL_SLOTS = 32

    work = tempfile.mkdtemp(prefix="aeon-fixtures-")
    try:
        vecs = dense_forest(NODES, DIM, cluster_count=4, seed=7)
        save_dataset(os.path.join(FIXDIR, "dataset.bin"), vecs)

        for quant, tag in ((atlas_mod.QUANT_FP32, "fp32"), (atlas_mod.QUANT_INT8, "int8")):
            d = os.path.join(work, tag)
            eng = MemoryEngine.create(d, dim=DIM, quant=quant, sync=False,
                                      initial_slots=32)
            for v in vecs:
                eng.insert(v)
            for i in range(EVENTS):
                eng.append_event(1, f"fixture event {i} with some text payload".encode(),
                                 vecs[i], ref_ids=[i + 1])
            eng.tombstone(3)
            eng.tombstone_event(2)
            eng.compact()

            a = eng.atlas
            copy_prefix(a.gf.path, os.path.join(FIXDIR, f"atlas_{tag}.bin"),
                        HEADER_SIZE + a.node_count * a.stride)
            if quant == atlas_mod.QUANT_FP32:
                t = eng.trace
                copy_prefix(t.ev.path, os.path.join(FIXDIR, "trace_events.bin"),
                            HEADER_SIZE + t.event_count * EVENT_SIZE)
                copy_prefix(t.em.path, os.path.join(FIXDIR, "trace_embeds.bin"),
                            HEADER_SIZE + t.event_count * DIM * 4)
                copy_prefix(t.blobs.gf.path, os.path.join(FIXDIR, "trace_blobs.bin"),
                            t.blobs.used_bytes)
            eng.close()
        print(f"fixtures written to {FIXDIR}")
    finally:
        shutil.rmtree(work, ignore_errors=True)


if __name__ == "__main__":
    main()
