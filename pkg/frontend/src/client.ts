/**
 * HTTP client for the engine service.
 *
 * JSON endpoints are plain request/response; the binary endpoints
 * (`/index/node/{id}/vector`, `/blob/...`) resolve to read-only typed views
 * wrapping the response ArrayBuffer itself - the payload is never copied
 * after it leaves the socket.
 */

import { byteView, f32View, i8View } from "./views.js";

export interface QueryResult {
  node_id: number;
  similarity: number;
  hops: number;
  comparisons: number;
  source: string;
}

export interface TraceHit {
  event_id: number;
  similarity: number;
}

export interface EventSummary {
  event_id: number;
  kind: number;
  timestamp: number;
  preview: string;
  ref_ids: number[];
  blob_offset: number;
  blob_size: number;
  blob_generation: number;
}

export interface VectorPayload {
  /** Read-only view aliasing `buffer` (f32 for FP32 indexes, i8 for INT8). */
  view: Float32Array | Int8Array;
  /** The raw response body; `view.buffer` is exactly this object. */
  buffer: ArrayBuffer;
  dtype: "float32" | "int8";
  dim: number;
  /** Dequantization scale (1.0 for FP32). */
  scale: number;
}

export class AeonServiceError extends Error {
  constructor(readonly status: number, message: string) {
    super(`${status}: ${message}`);
    this.name = "AeonServiceError";
  }
}

export class AeonClient {
  constructor(readonly baseUrl: string,
              private readonly fetchFn: typeof fetch = fetch) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path, init);
    if (!res.ok) throw new AeonServiceError(res.status, await res.text());
    return (await res.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.json<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  health(): Promise<{ status: string; dim: number }> {
    return this.json("/healthz");
  }

  stats(): Promise<Record<string, unknown>> {
    return this.json("/stats");
  }

  insert(vector: ArrayLike<number>, normalize = false): Promise<{ node_id: number }> {
    return this.post("/index/insert", { vector: Array.from(vector), normalize });
  }

  query(vector: ArrayLike<number>, opts: { width?: number; useCsls?: boolean;
        sessionId?: string } = {}): Promise<QueryResult> {
    return this.post("/index/query", {
      vector: Array.from(vector),
      width: opts.width ?? 1,
      use_csls: opts.useCsls ?? false,
      session_id: opts.sessionId ?? null,
    });
  }

  tombstone(nodeId: number): Promise<{ ok: boolean }> {
    return this.post(`/index/tombstone/${nodeId}`, {});
  }

  appendEvent(kind: number, text: string, embedding: ArrayLike<number>,
              refIds: number[] = []): Promise<{ event_id: number }> {
    return this.post("/trace/events", {
      kind, text, embedding: Array.from(embedding), ref_ids: refIds,
    });
  }

  traceSearch(vector: ArrayLike<number>, kBlocks = 3, topN = 10):
      Promise<{ results: TraceHit[]; comparisons: number }> {
    return this.post("/trace/search", {
      vector: Array.from(vector), k_blocks: kBlocks, top_n: topN,
    });
  }

  recent(n = 10): Promise<EventSummary[]> {
    return this.json(`/trace/recent?n=${n}`);
  }

  readEvent(eventId: number): Promise<EventSummary> {
    return this.json(`/trace/event/${eventId}`);
  }

  compact(): Promise<Record<string, number>> {
    return this.post("/admin/compact", {});
  }

  /** Fetch a stored vector as a zero-copy read-only view over the response. */
  async nodeVector(nodeId: number, fp32 = false): Promise<VectorPayload> {
    const res = await this.fetchFn(
      `${this.baseUrl}/index/node/${nodeId}/vector${fp32 ? "?fp32=true" : ""}`);
    if (!res.ok) throw new AeonServiceError(res.status, await res.text());
    const buffer = await res.arrayBuffer();
    const dim = Number(res.headers.get("x-aeon-dim"));
    const dtype = res.headers.get("x-aeon-dtype") as "float32" | "int8";
    const scale = Number(res.headers.get("x-aeon-scale"));
    const view = dtype === "float32" ? f32View(buffer, 0, dim) : i8View(buffer, 0, dim);
    return { view, buffer, dtype, dim, scale };
  }

  /** Fetch blob text as a zero-copy read-only byte view over the response. */
  async blob(generation: number, offset: number, size: number):
      Promise<{ view: Uint8Array; buffer: ArrayBuffer }> {
    const res = await this.fetchFn(`${this.baseUrl}/blob/${generation}/${offset}/${size}`);
    if (!res.ok) throw new AeonServiceError(res.status, await res.text());
    const buffer = await res.arrayBuffer();
    return { view: byteView(buffer), buffer };
  }
}
