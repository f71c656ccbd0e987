"""Benchmark scenarios for the engine at desk scale.

Counters (comparisons, hops, lock-section ops, bytes) are the first-class
outputs; wall clocks are reported but depend on the machine. Each scenario
returns the counter dict that also feeds the acceptance suite.
"""

from __future__ import annotations

import mmap
import os
import shutil
import signal
import statistics
import struct
import subprocess
import sys
import tempfile
import threading
import time

import numpy as np

from . import locks
from .atlas import QUANT_FP32, QUANT_INT8
from .datasets import conversational_walk, dense_forest
from .engine import MemoryEngine
from .kernels import dot_fp32, dot_int8, normalize, quantize
from .metrics import DEFAULT_REPEATS, percentiles, timed
from .slb import SemanticCache
from .storage import EpochManager
from .trace import KIND_USER

QUANT_NAMES = {QUANT_FP32: "fp32", QUANT_INT8: "int8"}


def scratch_dir(prefer_tmpfs: bool = True) -> str:
    """Benchmark working dir; tmpfs keeps sync barriers out of the numbers."""
    base = os.environ.get("AEON_DATA_DIR")
    if base is None and prefer_tmpfs and os.path.isdir("/dev/shm"):
        base = "/dev/shm"
    return tempfile.mkdtemp(prefix="aeon-bench-", dir=base)


def build_engine(vectors: np.ndarray, directory: str, quant: int,
                 wal_enabled: bool = True, sync: bool = True,
                 compact: bool = True) -> MemoryEngine:
    eng = MemoryEngine.create(directory, dim=vectors.shape[1], quant=quant,
                              wal_enabled=wal_enabled, sync=sync)
    for v in vectors:
        eng.insert(v)
    if compact:
        eng.compact()
    return eng


def bulk_flat_ids(eng: MemoryEngine, queries: np.ndarray,
                  chunk: int = 16384) -> np.ndarray:
    """Exact top-1 ids for many queries at once (the recall oracle)."""
    atlas = eng.atlas
    v = atlas.views()
    n = atlas.node_count
    best_sim = np.full(len(queries), -np.inf, dtype=np.float64)
    best_slot = np.zeros(len(queries), dtype=np.int64)
    if atlas.quant == QUANT_INT8:
        # same scoring as the engine: quantized query against quantized rows;
        # int8 values are exact in f32 and D=768 sums stay below 2^24, and the
        # query's own scale is constant per column so it cannot move the argmax
        qt = np.stack([quantize(q).values for q in queries]).astype(np.float32).T
    else:
        qt = queries.T.astype(np.float32)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        if atlas.quant == QUANT_INT8:
            rows = v.vectors[lo:hi].astype(np.float32)
            sims = (rows @ qt) * v.scale[lo:hi, None]
        else:
            sims = v.vectors[lo:hi] @ qt
        live = (v.flags[lo:hi] & 1) == 0
        sims = np.where(live[:, None], sims, -np.inf)
        top = sims.argmax(axis=0)
        top_sim = sims[top, np.arange(len(queries))]
        better = top_sim > best_sim
        best_sim[better] = top_sim[better]
        best_slot[better] = lo + top[better]
    return v.ids[best_slot].astype(np.int64)


# -- kernels ---------------------------------------------------------------------


def bench_kernels(dim: int = 768, pairs: int = 10_000, seed: int = 0,
                  repeats: int = DEFAULT_REPEATS) -> dict:
    a = dense_forest(pairs, dim, seed=seed)
    b = dense_forest(pairs, dim, seed=seed + 1)
    loop_n = min(1000, pairs)
    qa = [quantize(x) for x in a[:loop_n]]
    qb = [quantize(x) for x in b[:loop_n]]

    def fp32_loop():
        s = 0.0
        for i in range(loop_n):
            s += dot_fp32(a[i], b[i])
        return s

    def int8_loop():
        s = 0.0
        for i in range(loop_n):
            s += dot_int8(qa[i], qb[i])
        return s

    wall_fp32, _ = timed(fp32_loop, repeats)
    wall_int8, _ = timed(int8_loop, repeats)

    # INT8/FP32 agreement over the full pair set (batched, same math as kernels)
    diffs = []
    for i in range(0, pairs, 2000):
        j = min(i + 2000, pairs)
        f = np.einsum("ij,ij->i", a[i:j], b[i:j])
        q8 = np.array([dot_int8(quantize(a[k]), quantize(b[k])) for k in range(i, j)])
        diffs.append(np.abs(q8 - f))
    mean_err = float(np.concatenate(diffs).mean())

    return {
        "name": "bench-kernels",
        "params": {"dim": dim, "pairs": pairs, "seed": seed},
        "wall_s": wall_fp32,
        "counters": {
            "fp32_ns_per_op": statistics.median(wall_fp32) / loop_n * 1e9,
            "int8_ns_per_op": statistics.median(wall_int8) / loop_n * 1e9,
            "mean_abs_int8_fp32_diff": mean_err,
            "pairs": pairs,
        },
    }


# -- traversal / compression ---------------------------------------------------------


def bench_traversal(sizes=(10_000, 100_000), dim: int = 768, seed: int = 0,
                    n_queries: int = 1000, base_dir: str | None = None,
                    repeats: int = DEFAULT_REPEATS) -> list[dict]:
    out = []
    root = base_dir or scratch_dir()
    try:
        for n in sizes:
            vectors = dense_forest(n, dim, seed=seed)
            rng = np.random.default_rng(seed + 7)
            idx = rng.integers(0, n, n_queries)
            queries = vectors[idx]
            sizes_by_quant = {}
            for quant in (QUANT_FP32, QUANT_INT8):
                d = os.path.join(root, f"t{n}-{quant}")
                eng = build_engine(vectors, d, quant, wal_enabled=False)
                depth = eng.atlas.depth
                oracle = bulk_flat_ids(eng, queries)

                hops = np.empty(n_queries)
                comps = np.empty(n_queries)
                found = np.empty(n_queries, dtype=np.int64)

                def run_queries():
                    for i, q in enumerate(queries):
                        r = eng.query(q)
                        hops[i], comps[i], found[i] = r.hops, r.comparisons, r.node_id
                    return None

                wall, _ = timed(run_queries, repeats)
                recall = float((found == oracle).mean())
                flat_comps = eng.atlas.total_live()
                file_bytes = os.stat(eng.atlas.gf.path).st_size
                sizes_by_quant[quant] = file_bytes
                out.append({
                    "name": "bench-traversal",
                    "params": {"n": n, "dim": dim, "quant": QUANT_NAMES[quant],
                               "seed": seed, "queries": n_queries},
                    "wall_s": wall,
                    "counters": {
                        "depth": depth,
                        "mean_hops": float(hops.mean()),
                        "mean_comparisons": float(comps.mean()),
                        "max_comparisons": int(comps.max()),
                        "comparison_bound": (depth + 1) * 64 + eng.atlas.delta.count,
                        "flat_comparisons": flat_comps,
                        "speedup_vs_flat": flat_comps / float(comps.mean()),
                        "recall_at_1": recall,
                        "file_bytes": file_bytes,
                        "node_count": eng.atlas.node_count,
                    },
                })
                eng.close()
                shutil.rmtree(d, ignore_errors=True)
            out[-1]["counters"]["int8_fp32_size_ratio"] = (
                sizes_by_quant[QUANT_INT8] / sizes_by_quant[QUANT_FP32])
    finally:
        if base_dir is None:
            shutil.rmtree(root, ignore_errors=True)
    return out


def bench_beam(n: int = 10_000, dim: int = 768, seed: int = 0, n_queries: int = 1000,
               base_dir: str | None = None) -> dict:
    root = base_dir or scratch_dir()
    try:
        vectors = dense_forest(n, dim, seed=seed)
        rng = np.random.default_rng(seed + 13)
        queries = vectors[rng.integers(0, n, n_queries)]
        eng = build_engine(vectors, os.path.join(root, "beam"), QUANT_FP32,
                           wal_enabled=False)
        oracle = bulk_flat_ids(eng, queries)
        counters = {}
        for label, width, csls in (("greedy", 1, False), ("beam3", 3, False),
                                   ("beam3_csls", 3, True)):
            found = np.empty(n_queries, dtype=np.int64)
            evaluated = np.empty(n_queries)
            samples = []
            for i, q in enumerate(queries):
                t0 = time.perf_counter()
                r = eng.query(q, width=width, use_csls=csls)
                samples.append(time.perf_counter() - t0)
                found[i], evaluated[i] = r.node_id, r.nodes_evaluated
            counters[label] = {
                "recall_at_1": float((found == oracle).mean()),
                "nodes_per_query": float(evaluated.mean()),
                **percentiles(samples),
            }
        eng.close()
        return {"name": "bench-beam", "params": {"n": n, "dim": dim, "seed": seed},
                "wall_s": [], "counters": counters}
    finally:
        if base_dir is None:
            shutil.rmtree(root, ignore_errors=True)


# -- WAL ---------------------------------------------------------------------------------


def bench_wal(n: int = 10_000, dim: int = 768, seed: int = 0,
              repeats: int = DEFAULT_REPEATS, base_dir: str | None = None) -> dict:
    """Insert throughput with the WAL enabled vs disabled (FP32, tmpfs dir)."""
    root = base_dir or scratch_dir(prefer_tmpfs=True)
    vectors = dense_forest(n, dim, seed=seed)
    try:
        throughput = {True: [], False: []}
        for rep in range(repeats):
            for wal_on in (True, False):
                d = os.path.join(root, f"wal-{wal_on}-{rep}")
                eng = MemoryEngine.create(d, dim=dim, quant=QUANT_FP32,
                                          wal_enabled=wal_on)
                t0 = time.perf_counter()
                for v in vectors:
                    eng.insert(v)
                dt = time.perf_counter() - t0
                throughput[wal_on].append(n / dt)
                eng.close()
                shutil.rmtree(d, ignore_errors=True)
        on = statistics.median(throughput[True])
        off = statistics.median(throughput[False])
        return {
            "name": "bench-wal",
            "params": {"n": n, "dim": dim, "seed": seed},
            "wall_s": [n / t for t in throughput[True]],
            "counters": {
                "throughput_wal_on_ops": on,
                "throughput_wal_off_ops": off,
                "throughput_ratio": on / off,
                "lock_cohold_violations": locks.violation_count("wal-log", "delta"),
            },
        }
    finally:
        if base_dir is None:
            shutil.rmtree(root, ignore_errors=True)


# -- SLB -------------------------------------------------------------------------------------


def bench_slb_occupancy(dim: int = 768, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    comparisons = {}
    for occ in (16, 32, 64):
        cache = SemanticCache(dim=dim, tau_hit=0.999999)
        for i in range(occ):
            cache.insert("sweep", normalize(rng.standard_normal(dim)), node_id=i)
        q = normalize(rng.standard_normal(dim))
        samples = []
        out = None
        for _ in range(200):
            t0 = time.perf_counter()
            out = cache.lookup("sweep", q)
            samples.append(time.perf_counter() - t0)
        comparisons[occ] = {"comparisons": out.comparisons, **percentiles(samples)}
    return {"name": "bench-slb-occupancy", "params": {"dim": dim},
            "wall_s": [], "counters": {str(k): v for k, v in comparisons.items()}}


def bench_slb_walk(n_nodes: int = 10_000, dim: int = 768, n_queries: int = 10_000,
                   seed: int = 0, base_dir: str | None = None) -> dict:
    root = base_dir or scratch_dir()
    try:
        vectors = dense_forest(n_nodes, dim, seed=seed)
        eng = build_engine(vectors, os.path.join(root, "slb"), QUANT_FP32,
                           wal_enabled=False)
        queries = conversational_walk(n_queries, vectors, seed=seed + 1)
        hit_times, miss_times = [], []
        for q in queries:
            t0 = time.perf_counter()
            res = eng.lookup("walk-session", q)
            dt = time.perf_counter() - t0
            (hit_times if res.source == "slb" else miss_times).append(dt)
        report = eng.slb.hit_rate_report()
        h = report["rate"]
        l_hit = statistics.fmean(hit_times) if hit_times else 0.0
        l_miss = statistics.fmean(miss_times) if miss_times else 0.0
        l_eff_formula = h * l_hit + (1 - h) * l_miss
        l_eff_measured = statistics.fmean(hit_times + miss_times)
        eng.close()
        return {
            "name": "bench-slb-walk",
            "params": {"n_nodes": n_nodes, "dim": dim, "queries": n_queries, "seed": seed},
            "wall_s": [],
            "counters": {
                "hit_rate": h,
                "hits": report["hits"],
                "misses": report["misses"],
                "l_hit_us": l_hit * 1e6,
                "l_miss_us": l_miss * 1e6,
                "l_eff_formula_us": l_eff_formula * 1e6,
                "l_eff_measured_us": l_eff_measured * 1e6,
                "l_eff_identity_error": abs(l_eff_formula - l_eff_measured)
                / max(l_eff_measured, 1e-12),
            },
        }
    finally:
        if base_dir is None:
            shutil.rmtree(root, ignore_errors=True)


# -- EBR ----------------------------------------------------------------------------------------


def ebr_stress(readers: int = 15, iterations: int = 100_000,
               region_words: int = 1024, base_dir: str | None = None) -> dict:
    """Hostile contention: continuously remapping writer, validating readers.

    Regions are real mmap'd files holding self-validating 8-byte patterns
    (hi word == lo word ^ 0xDEADBEEF). A torn read breaks the pattern; a
    use-after-reclaim raises on the closed mapping. Both must never happen.
    """
    root = base_dir or scratch_dir()
    ebr = EpochManager(max_threads=readers + 4)
    stop = threading.Event()
    errors: list[str] = []
    published: dict = {}
    read_count = [0] * readers

    def make_region(token: int):
        path = os.path.join(root, f"region-{token}.bin")
        fd = os.open(path, os.O_CREAT | os.O_RDWR)
        size = region_words * 8
        os.ftruncate(fd, size)
        mm = mmap.mmap(fd, size)
        arr = np.ndarray((region_words,), "<u8", buffer=mm)
        tok = np.uint64(token & 0x7FFFFFFF)
        arr[:] = (tok << np.uint64(32)) | (tok ^ np.uint64(0xDEADBEEF))
        del arr
        return mm, fd, path

    published["region"] = make_region(1)

    def writer():
        token = 2
        while not stop.is_set():
            old_mm, old_fd, old_path = published["region"]
            published["region"] = make_region(token)

            def destroy(mm=old_mm, fd=old_fd, path=old_path):
                mm.close()
                os.close(fd)
                os.unlink(path)

            ebr.retire(destroy)
            ebr.try_reclaim()
            token += 1

    def reader(idx: int):
        rng = np.random.default_rng(idx)
        offsets = (rng.integers(0, region_words, size=iterations) * 8).tolist()
        unpack = struct.unpack_from
        pin = ebr.pin
        n = 0
        for off in offsets:
            guard = pin()
            try:
                mm, _fd, _path = published["region"]
                try:
                    v = unpack("<Q", mm, off)[0]
                except ValueError:
                    errors.append("use-after-reclaim: read hit a closed mapping")
                    continue
                hi, lo = v >> 32, v & 0xFFFFFFFF
                if (hi ^ 0xDEADBEEF) != lo:
                    errors.append(f"torn read {v:#x}")
                n += 1
            finally:
                guard.release()
        read_count[idx] = n

    threads = [threading.Thread(target=reader, args=(i,)) for i in range(readers)]
    w = threading.Thread(target=writer)
    t0 = time.perf_counter()
    w.start()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stop.set()
    w.join()
    wall = time.perf_counter() - t0
    ebr.drain(attempts=64)
    published["region"][0].close()
    os.close(published["region"][1])
    counters = {
        "readers": readers,
        "iterations_per_reader": iterations,
        "total_reads": sum(read_count),
        "torn_reads": sum("torn" in e for e in errors),
        "use_after_reclaim": sum("use-after" in e for e in errors),
        "regions_retired": ebr.retired_count,
        "regions_reclaimed": ebr.reclaimed_count,
        "pending_regions": ebr.pending_regions(),
    }
    if base_dir is None:
        shutil.rmtree(root, ignore_errors=True)
    return {"name": "bench-ebr", "params": {"readers": readers, "iterations": iterations},
            "wall_s": [wall], "counters": counters}


# -- compaction -------------------------------------------------------------------------------


def bench_compaction(n: int = 10_000, tombstone_ratio: float = 0.4, dim: int = 768,
                     n_queries: int = 1000, seed: int = 0,
                     base_dir: str | None = None) -> dict:
    root = base_dir or scratch_dir()
    try:
        vectors = dense_forest(n, dim, seed=seed)
        eng = build_engine(vectors, os.path.join(root, "c"), QUANT_FP32,
                           wal_enabled=True, sync=False, compact=False)
        rng = np.random.default_rng(seed + 3)
        ids = sorted(eng.atlas.delta.id_to_slot)
        dead = rng.choice(ids, size=int(n * tombstone_ratio), replace=False)
        for nid in dead:
            eng.tombstone(int(nid))
        queries = dense_forest(n_queries, dim, seed=seed + 5)
        before = [eng.flat_scan(q).node_id for q in queries]

        errors: list[str] = []
        stop = threading.Event()

        def hammer():
            r = np.random.default_rng(99)
            while not stop.is_set():
                try:
                    eng.query(queries[int(r.integers(0, n_queries))])
                except Exception as exc:
                    errors.append(repr(exc))

        readers = [threading.Thread(target=hammer) for _ in range(4)]
        for t in readers:
            t.start()
        stats = eng.compact()
        stop.set()
        for t in readers:
            t.join()
        after = [eng.flat_scan(q).node_id for q in queries]
        equivalent = sum(b == a for b, a in zip(before, after))
        replay = eng.wal.replay({})
        counters = {
            "nodes_before": n,
            "tombstoned": len(dead),
            "nodes_after": stats.nodes_copied,
            "expected_after": n - len(dead),
            "query_equivalence": equivalent / n_queries,
            "reader_errors_during_compaction": len(errors),
            "wal_replay_after": list(replay),
            "freeze_ops": stats.freeze_ops,
            "swap_ops": stats.swap_ops,
            "catchup_ops": stats.catchup_ops,
            "freeze_us": stats.freeze_duration_s * 1e6,
            "swap_us": stats.swap_duration_s * 1e6,
            "copy_s": stats.copy_duration_s,
            "bytes_reclaimed": stats.bytes_reclaimed,
        }
        eng.close()
        return {"name": "bench-compaction",
                "params": {"n": n, "tombstone_ratio": tombstone_ratio, "dim": dim,
                           "seed": seed},
                "wall_s": [stats.copy_duration_s], "counters": counters}
    finally:
        if base_dir is None:
            shutil.rmtree(root, ignore_errors=True)


# -- trace ------------------------------------------------------------------------------------


def bench_trace(n_events: int = 100_000, dim: int = 128, k_blocks: int = 3,
                n_queries: int = 1000, gc_ratio: float = 0.5, seed: int = 0,
                base_dir: str | None = None) -> dict:
    root = base_dir or scratch_dir()
    try:
        eng = MemoryEngine.create(os.path.join(root, "t"), dim=dim, wal_enabled=False)
        rng = np.random.default_rng(seed)
        topic = None
        embs = np.empty((n_events, dim), dtype=np.float32)
        for i in range(n_events):
            if i % 512 == 0:
                topic = rng.standard_normal(dim)
                topic /= np.linalg.norm(topic)
            e = topic + 0.25 / np.sqrt(dim) * rng.standard_normal(dim)
            embs[i] = e / np.linalg.norm(e)
        ids = np.empty(n_events, dtype=np.int64)
        t0 = time.perf_counter()
        for i in range(n_events):
            ids[i] = eng.append_event(KIND_USER, b"event %d" % i, embs[i])
        append_wall = time.perf_counter() - t0

        nblocks = -(-n_events // 1024)
        agree = 0
        comps_max = 0
        for _ in range(n_queries):
            i = int(rng.integers(0, n_events))
            g = rng.standard_normal(dim)
            q = embs[i] + 0.05 * g / np.linalg.norm(g)
            q = (q / np.linalg.norm(q)).astype(np.float32)
            results, comps = eng.trace_search(q, k_blocks=k_blocks, top_n=1)
            comps_max = max(comps_max, comps)
            full = int(ids[int(np.argmax(embs @ q))])
            agree += results[0][0] == full

        dead = rng.choice(ids, size=int(n_events * gc_ratio), replace=False)
        for eid in dead:
            eng.tombstone_event(int(eid))
        t0 = time.perf_counter()
        stats = eng.compact()
        gc_wall = time.perf_counter() - t0
        counters = {
            "events": n_events,
            "blocks": nblocks,
            "k_blocks": k_blocks,
            "max_comparisons": comps_max,
            "comparison_bound": nblocks + k_blocks * 1024,
            "full_scan_comparisons": n_events,
            "top1_agreement": agree / n_queries,
            "tombstoned": len(dead),
            "events_after_gc": eng.trace.event_count,
            "append_wall_s": append_wall,
            "gc_wall_s": gc_wall,
        }
        eng.close()
        return {"name": "bench-trace",
                "params": {"events": n_events, "dim": dim, "k": k_blocks, "seed": seed},
                "wall_s": [gc_wall], "counters": counters}
    finally:
        if base_dir is None:
            shutil.rmtree(root, ignore_errors=True)


# -- crash injection -------------------------------------------------------------------------


def crash_test(iterations: int = 50, dim: int = 48, base_dir: str | None = None,
               kill_after_s: tuple[float, float] = (0.05, 0.25)) -> dict:
    """Kill a child mid-insert, reopen, verify prefix durability and integrity."""
    root = base_dir or tempfile.mkdtemp(prefix="aeon-crash-")
    d = os.path.join(root, "ix")
    rng = np.random.default_rng(1234)
    violations = []
    recovered_counts = []
    prev_count = 0
    try:
        for round_no in range(iterations):
            proc = subprocess.Popen(
                [sys.executable, "-m", "aeon.cli", "_crash-child",
                 "--dir", d, "--dim", str(dim), "--seed", str(round_no)],
                stdout=subprocess.PIPE)
            proc.stdout.readline()
            time.sleep(float(rng.uniform(*kill_after_s)))
            proc.send_signal(signal.SIGKILL)
            proc.wait()
            try:
                eng = MemoryEngine.open(d)
            except Exception as exc:
                violations.append(f"round {round_no}: reopen failed: {exc!r}")
                break
            ids = sorted(set(eng.atlas.id_to_slot) | set(eng.atlas.delta.id_to_slot))
            if ids != list(range(1, len(ids) + 1)):
                violations.append(f"round {round_no}: id set has holes")
            if len(ids) < prev_count:
                violations.append(f"round {round_no}: recovered fewer nodes than before")
            prev_count = len(ids)
            step = max(1, len(ids) // 20)
            for nid in ids[::step]:
                v = eng.atlas.vector_fp32(nid)
                if abs(float(np.linalg.norm(v)) - 1.0) > 1e-3:
                    violations.append(f"round {round_no}: node {nid} corrupt")
            recovered_counts.append(len(ids))
            eng.close()
        return {
            "name": "crash-test",
            "params": {"iterations": iterations, "dim": dim},
            "wall_s": [],
            "counters": {
                "rounds": iterations,
                "violations": len(violations),
                "violation_details": violations[:10],
                "final_node_count": prev_count,
                "recovered_counts": recovered_counts[-5:],
            },
        }
    finally:
        if base_dir is None:
            shutil.rmtree(root, ignore_errors=True)
