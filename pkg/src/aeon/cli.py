"""Command-line tool: dataset generation, index lifecycle, benchmarks, serving.

Configuration precedence: explicit flags > --config key=value file > built-in
defaults. AEON_DATA_DIR sets the default data directory. Benchmark verbs run
in-process (the harness owns the engine; crash injection and lock
instrumentation need that); the `serve` verb exposes the engine over HTTP and
the `remote` verbs are thin clients against a running service.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench
from .atlas import QUANT_FP32, QUANT_INT8
from .datasets import dense_forest, load_dataset, save_dataset
from .engine import MemoryEngine
from .errors import AeonError
from .kernels import normalize
from .metrics import MetricsReport

QUANTS = {"fp32": QUANT_FP32, "int8": QUANT_INT8}


def _default_dir() -> str:
    return os.environ.get("AEON_DATA_DIR", "./aeon-data")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aeon", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="key=value config file; flags win", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="write a clustered vector file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dim", type=int, default=768)
    g.add_argument("--clusters", type=int, default=None)
    g.add_argument("--spread", type=float, default=0.35)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    b = sub.add_parser("build", help="create an index from a dataset file")
    b.add_argument("--dataset", required=True)
    b.add_argument("--dir", default=None)
    b.add_argument("--quant", choices=QUANTS, default="fp32")
    b.add_argument("--no-wal", action="store_true")
    b.add_argument("--no-sync", action="store_true")
    b.add_argument("--no-compact", action="store_true")

    q = sub.add_parser("query", help="query an index with a dataset row")
    q.add_argument("--dir", default=None)
    q.add_argument("--dataset", required=True)
    q.add_argument("--row", type=int, default=0)
    q.add_argument("--beam", type=int, default=1)
    q.add_argument("--csls", action="store_true")
    q.add_argument("--flat", action="store_true", help="exact scan instead of descent")

    for name, extra in {
        "bench-kernels": lambda sp: (
            sp.add_argument("--dim", type=int, default=768),
            sp.add_argument("--pairs", type=int, default=10_000)),
        "bench-traversal": lambda sp: (
            sp.add_argument("--sizes", type=int, nargs="+", default=[10_000, 100_000]),
            sp.add_argument("--dim", type=int, default=768),
            sp.add_argument("--queries", type=int, default=1000)),
        "bench-wal": lambda sp: (
            sp.add_argument("--n", type=int, default=10_000),
            sp.add_argument("--dim", type=int, default=768)),
        "bench-slb": lambda sp: (
            sp.add_argument("--nodes", type=int, default=10_000),
            sp.add_argument("--dim", type=int, default=768),
            sp.add_argument("--queries", type=int, default=10_000)),
        "bench-ebr": lambda sp: (
            sp.add_argument("--readers", type=int, default=15),
            sp.add_argument("--iterations", type=int, default=100_000)),
        "bench-compaction": lambda sp: (
            sp.add_argument("--n", type=int, default=10_000),
            sp.add_argument("--dim", type=int, default=768),
            sp.add_argument("--tombstone-ratio", type=float, default=0.4)),
        "bench-trace": lambda sp: (
            sp.add_argument("--events", type=int, default=100_000),
            sp.add_argument("--dim", type=int, default=128),
            sp.add_argument("--k", type=int, default=3)),
        "crash-test": lambda sp: (
            sp.add_argument("--iterations", type=int, default=50),
            sp.add_argument("--dim", type=int, default=48)),
    }.items():
        sp = sub.add_parser(name)
        extra(sp)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="master_metrics.json")

    s = sub.add_parser("serve", help="run the HTTP service over an index directory")
    s.add_argument("--dir", default=None)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8787)

    r = sub.add_parser("remote", help="thin client for a running service")
    r.add_argument("action", choices=["stats", "query", "insert", "recent", "compact"])
    r.add_argument("--url", default="http://127.0.0.1:8787")
    r.add_argument("--dataset", default=None)
    r.add_argument("--row", type=int, default=0)
    r.add_argument("--n", type=int, default=10)
    r.add_argument("--session", default=None)

    c = sub.add_parser("_crash-child", help=argparse.SUPPRESS)
    c.add_argument("--dir", required=True)
    c.add_argument("--dim", type=int, default=48)
    c.add_argument("--seed", type=int, default=0)

    return p


def apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    """key=value file becomes parser defaults; explicit flags still win."""
    config: dict[str, str] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            k, v = line.split("=", 1)
            config[k.strip().replace("-", "_")] = v.strip()
    def visit(p):
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction):
                for child in action.choices.values():
                    visit(child)
            elif action.dest in config:
                raw = config[action.dest]
                if isinstance(action, (argparse._StoreTrueAction,)):
                    action.default = raw.lower() in ("1", "true", "yes")
                elif action.type is not None:
                    action.default = action.type(raw)
                else:
                    action.default = raw
                action.required = False  # the config satisfied it
    visit(parser)


def _save_report(records, out: str) -> None:
    report = MetricsReport()
    for rec in records if isinstance(records, list) else [records]:
        report.add(rec["name"], rec["params"], rec["wall_s"], rec["counters"])
    report.save(out)
    print(f"wrote {out}")
    for rec in records if isinstance(records, list) else [records]:
        print(json.dumps({rec["name"]: rec["counters"]}, indent=2, default=str))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    if "--config" in argv:
        cfg = argv[argv.index("--config") + 1]
        apply_config(parser, cfg)
    args = parser.parse_args(argv)
    try:
        return run(args)
    except AeonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run(args) -> int:
    cmd = args.command

    if cmd == "gen-dataset":
        vecs = dense_forest(args.n, args.dim, args.clusters, args.spread, args.seed)
        save_dataset(args.out, vecs)
        print(f"wrote {args.out}: {args.n} x {args.dim} (seed {args.seed})")
        return 0

    if cmd == "build":
        directory = args.dir or _default_dir()
        vecs = load_dataset(args.dataset)
        eng = MemoryEngine.create(directory, dim=vecs.shape[1], quant=QUANTS[args.quant],
                                  wal_enabled=not args.no_wal, sync=not args.no_sync)
        for v in vecs:
            eng.insert(v)
        if not args.no_compact:
            eng.compact()
        print(json.dumps(eng.stats(), default=str, indent=2))
        eng.close()
        return 0

    if cmd == "query":
        directory = args.dir or _default_dir()
        eng = MemoryEngine.open(directory)
        q = load_dataset(args.dataset)[args.row]
        r = eng.flat_scan(q) if args.flat else eng.query(q, width=args.beam,
                                                         use_csls=args.csls)
        print(json.dumps({"node_id": r.node_id, "similarity": r.similarity,
                          "hops": r.hops, "comparisons": r.comparisons}))
        eng.close()
        return 0

    if cmd == "bench-kernels":
        _save_report(bench.bench_kernels(args.dim, args.pairs, args.seed), args.out)
        return 0

    if cmd == "bench-traversal":
        _save_report(bench.bench_traversal(tuple(args.sizes), args.dim, args.seed,
                                           args.queries), args.out)
        return 0

    if cmd == "bench-wal":
        rec = bench.bench_wal(args.n, args.dim, args.seed)
        _save_report(rec, args.out)
        return 0 if rec["counters"]["lock_cohold_violations"] == 0 else 1

    if cmd == "bench-slb":
        records = [bench.bench_slb_occupancy(args.dim, args.seed),
                   bench.bench_slb_walk(args.nodes, args.dim, args.queries, args.seed)]
        _save_report(records, args.out)
        return 0

    if cmd == "bench-ebr":
        rec = bench.ebr_stress(args.readers, args.iterations)
        _save_report(rec, args.out)
        bad = rec["counters"]["torn_reads"] + rec["counters"]["use_after_reclaim"]
        return 0 if bad == 0 else 1

    if cmd == "bench-compaction":
        rec = bench.bench_compaction(args.n, args.tombstone_ratio, args.dim,
                                     seed=args.seed)
        _save_report(rec, args.out)
        return 0

    if cmd == "bench-trace":
        rec = bench.bench_trace(args.events, args.dim, args.k, seed=args.seed)
        _save_report(rec, args.out)
        return 0

    if cmd == "crash-test":
        rec = bench.crash_test(args.iterations, args.dim)
        _save_report(rec, args.out)
        return 0 if rec["counters"]["violations"] == 0 else 1

    if cmd == "serve":
        import uvicorn

        from .service import create_app
        directory = args.dir or _default_dir()
        eng = MemoryEngine.open(directory)
        app = create_app(engine=eng, own_engine=True)
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
        return 0

    if cmd == "remote":
        return _remote(args)

    if cmd == "_crash-child":
        return _crash_child(args)

    raise AssertionError(f"unhandled command {cmd}")


def _remote(args) -> int:
    import httpx

    base = args.url.rstrip("/")
    with httpx.Client(base_url=base, timeout=30.0) as client:
        if args.action == "stats":
            print(json.dumps(client.get("/stats").json(), indent=2))
        elif args.action == "recent":
            print(json.dumps(client.get("/trace/recent", params={"n": args.n}).json(),
                             indent=2))
        elif args.action == "compact":
            print(json.dumps(client.post("/admin/compact").json(), indent=2))
        elif args.action in ("query", "insert"):
            if not args.dataset:
                print("remote query/insert need --dataset", file=sys.stderr)
                return 2
            vec = load_dataset(args.dataset)[args.row].tolist()
            if args.action == "insert":
                r = client.post("/index/insert", json={"vector": vec})
            else:
                payload = {"vector": vec}
                if args.session:
                    payload["session_id"] = args.session
                r = client.post("/index/query", json=payload)
            print(json.dumps(r.json(), indent=2))
            if r.status_code >= 400:
                return 1
    return 0


def _crash_child(args) -> int:
    if os.path.exists(os.path.join(args.dir, "aeon.wal")):
        eng = MemoryEngine.open(args.dir)
    else:
        eng = MemoryEngine.create(args.dir, dim=args.dim)
    rng = np.random.default_rng(args.seed)
    print("ready", flush=True)
    while True:
        eng.insert(normalize(rng.standard_normal(args.dim)))


if __name__ == "__main__":
    sys.exit(main())
