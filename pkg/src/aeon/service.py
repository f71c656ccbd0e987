"""HTTP service wrapping one engine instance.

JSON endpoints cover inserts, queries, trace appends/search, listing, and
compaction. Vector and blob payloads are also exposed as raw binary endpoints
(application/octet-stream with layout headers) so clients can wrap the
response buffer in typed views without re-encoding.

The engine directory comes from AEON_DATA_DIR (or create_app's argument);
writers are serialized inside the engine, readers run under epoch guards.
"""

from __future__ import annotations

import os
from contextlib import asynccontextmanager

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel, Field

from . import kernels
from .atlas import QUANT_INT8
from .blobs import BlobRef
from .engine import MemoryEngine
from .errors import (AeonError, GoneError, InvalidArgumentError, NotFoundError,
                     StorageError)


class InsertRequest(BaseModel):
    vector: list[float]
    normalize: bool = False


class InsertResponse(BaseModel):
    node_id: int


class QueryRequest(BaseModel):
    vector: list[float]
    width: int = Field(default=1, ge=1)
    use_csls: bool = False
    session_id: str | None = None  # set to route through the semantic cache


class QueryResponse(BaseModel):
    node_id: int
    similarity: float
    hops: int = 0
    comparisons: int
    source: str = "atlas"


class EventRequest(BaseModel):
    kind: int = Field(default=1, ge=1, le=3)
    text: str = ""
    embedding: list[float]
    ref_ids: list[int] = []


class EventResponse(BaseModel):
    event_id: int


class TraceHit(BaseModel):
    event_id: int
    similarity: float


class TraceSearchRequest(BaseModel):
    vector: list[float]
    k_blocks: int = Field(default=3, ge=1)
    top_n: int = Field(default=10, ge=1)


class TraceSearchResponse(BaseModel):
    results: list[TraceHit]
    comparisons: int


class EventSummary(BaseModel):
    event_id: int
    kind: int
    timestamp: int
    preview: str
    ref_ids: list[int]
    blob_offset: int
    blob_size: int
    blob_generation: int


class CompactResponse(BaseModel):
    nodes_copied: int
    events_copied: int
    freeze_ops: int
    swap_ops: int
    catchup_ops: int
    bytes_reclaimed: int


def _http_error(exc: AeonError) -> HTTPException:
    if isinstance(exc, NotFoundError):
        return HTTPException(404, str(exc))
    if isinstance(exc, InvalidArgumentError):
        return HTTPException(422, str(exc))
    if isinstance(exc, GoneError):
        return HTTPException(410, str(exc))
    return HTTPException(500, str(exc))


def create_app(engine: MemoryEngine | None = None, directory: str | None = None,
               own_engine: bool = False) -> FastAPI:
    state = {"engine": engine}

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if state["engine"] is None:
            d = directory or os.environ.get("AEON_DATA_DIR")
            if d is None:
                raise StorageError("no engine: set AEON_DATA_DIR or pass directory")
            state["engine"] = MemoryEngine.open(d)
        yield
        if own_engine and state["engine"] is not None:
            state["engine"].close()

    app = FastAPI(title="aeon", lifespan=lifespan)

    def eng() -> MemoryEngine:
        return state["engine"]

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "dim": eng().atlas.dim}

    @app.get("/stats")
    def stats():
        return eng().stats()

    @app.post("/index/insert", response_model=InsertResponse)
    def insert(req: InsertRequest):
        try:
            vec = np.asarray(req.vector, dtype=np.float32)
            if req.normalize:
                vec = kernels.normalize(vec)
            return InsertResponse(node_id=eng().insert(vec))
        except AeonError as exc:
            raise _http_error(exc)

    @app.post("/index/query", response_model=QueryResponse)
    def query(req: QueryRequest):
        try:
            if req.session_id:
                r = eng().lookup(req.session_id, req.vector)
                return QueryResponse(node_id=r.node_id, similarity=r.similarity,
                                     comparisons=r.comparisons, source=r.source)
            r = eng().query(req.vector, width=req.width, use_csls=req.use_csls)
            return QueryResponse(node_id=r.node_id, similarity=r.similarity,
                                 hops=r.hops, comparisons=r.comparisons)
        except AeonError as exc:
            raise _http_error(exc)

    @app.post("/index/tombstone/{node_id}")
    def tombstone(node_id: int):
        try:
            eng().tombstone(node_id)
            return {"ok": True}
        except AeonError as exc:
            raise _http_error(exc)

    @app.get("/index/node/{node_id}/vector")
    def node_vector(node_id: int, fp32: bool = Query(default=False)):
        """Raw stored payload; X-Aeon-* headers describe the layout."""
        try:
            e = eng()
            with e.ebr.pin():
                if fp32 or e.atlas.quant != QUANT_INT8:
                    arr = e.atlas.vector_fp32(node_id)
                    dtype, scale = "float32", 1.0
                    body = arr.astype("<f4").tobytes()
                else:
                    view = e.atlas.vector_view(node_id)
                    dtype, scale = "int8", e.atlas.node_scale(node_id)
                    body = bytes(view)
        except AeonError as exc:
            raise _http_error(exc)
        return Response(content=body, media_type="application/octet-stream", headers={
            "X-Aeon-Dim": str(e.atlas.dim),
            "X-Aeon-Dtype": dtype,
            "X-Aeon-Scale": repr(scale),
        })

    @app.post("/trace/events", response_model=EventResponse)
    def append_event(req: EventRequest):
        try:
            eid = eng().append_event(req.kind, req.text.encode("utf-8"),
                                     req.embedding, req.ref_ids)
            return EventResponse(event_id=eid)
        except AeonError as exc:
            raise _http_error(exc)

    @app.post("/trace/search", response_model=TraceSearchResponse)
    def trace_search(req: TraceSearchRequest):
        try:
            results, comps = eng().trace_search(req.vector, req.k_blocks, req.top_n)
            return TraceSearchResponse(
                results=[TraceHit(event_id=eid, similarity=s) for eid, s in results],
                comparisons=comps)
        except AeonError as exc:
            raise _http_error(exc)

    def _summary(ev) -> EventSummary:
        return EventSummary(
            event_id=ev.event_id, kind=ev.kind, timestamp=ev.timestamp,
            preview=ev.preview.decode("utf-8", errors="replace"),
            ref_ids=list(ev.ref_ids), blob_offset=ev.blob_ref.offset,
            blob_size=ev.blob_ref.size, blob_generation=ev.blob_ref.generation)

    @app.get("/trace/recent", response_model=list[EventSummary])
    def recent(n: int = Query(default=10, ge=0)):
        return [_summary(ev) for ev in eng().get_recent(n)]

    @app.get("/trace/event/{event_id}", response_model=EventSummary)
    def read_event(event_id: int):
        try:
            return _summary(eng().read_event(event_id))
        except AeonError as exc:
            raise _http_error(exc)

    @app.get("/blob/{generation}/{offset}/{size}")
    def read_blob(generation: int, offset: int, size: int):
        try:
            with eng().read_blob(BlobRef(offset, size, generation)) as blob:
                body = bytes(blob.data)
        except AeonError as exc:
            raise _http_error(exc)
        return Response(content=body, media_type="application/octet-stream")

    @app.post("/admin/compact", response_model=CompactResponse)
    def compact():
        try:
            s = eng().compact()
        except AeonError as exc:
            raise _http_error(exc)
        return CompactResponse(nodes_copied=s.nodes_copied, events_copied=s.events_copied,
                               freeze_ops=s.freeze_ops, swap_ops=s.swap_ops,
                               catchup_ops=s.catchup_ops,
                               bytes_reclaimed=s.bytes_reclaimed)

    return app
