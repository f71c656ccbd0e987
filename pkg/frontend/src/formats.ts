/**
 * Zero-copy readers for the engine's binary file formats (little-endian).
 *
 * Every accessor returns a read-only typed view aliasing the source buffer;
 * nothing re-encodes or copies payload bytes. Layout tables live in the
 * engine repo under docs/BYTE_LAYOUT.md.
 */

import { byteView, f32View, i8View, readonlyView } from "./views.js";

export const HEADER_SIZE = 4096;
export const EVENT_SIZE = 512;

export const QUANT_FP32 = 0;
export const QUANT_INT8 = 1;

const MAGIC = {
  atlas: 0x4e4f4541, // "AEON"
  blobs: 0x424f4541, // "AEOB"
  events: 0x544f4541, // "AEOT"
  embeds: 0x454f4541, // "AEOE"
  dataset: 0x56444541, // "AEDV"
} as const;

export interface GenerationHeader {
  magic: number;
  version: number;
  generation: number;
  sealed: boolean;
  usedBytes: bigint;
}

export function readGenerationHeader(buffer: ArrayBuffer): GenerationHeader {
  const dv = new DataView(buffer);
  return {
    magic: dv.getUint32(0, true),
    version: dv.getUint32(4, true),
    generation: dv.getUint32(8, true),
    sealed: dv.getUint32(12, true) === 1,
    usedBytes: dv.getBigUint64(16, true),
  };
}

function expectMagic(buffer: ArrayBuffer, expected: number, what: string): void {
  const got = new DataView(buffer).getUint32(0, true);
  if (got !== expected) {
    throw new RangeError(`${what}: bad magic 0x${got.toString(16)}`);
  }
}

// ---- dataset files ("AEDV") -------------------------------------------------

export interface Dataset {
  count: number;
  dim: number;
  /** Zero-copy row view (f32[dim]) aliasing the dataset buffer. */
  row(i: number): Float32Array;
}

export function readDataset(buffer: ArrayBuffer): Dataset {
  expectMagic(buffer, MAGIC.dataset, "dataset");
  const dv = new DataView(buffer);
  const count = Number(dv.getBigUint64(4, true));
  const dim = dv.getUint32(12, true);
  return {
    count,
    dim,
    row(i: number): Float32Array {
      if (i < 0 || i >= count) throw new RangeError(`row ${i} out of range`);
      return f32View(buffer, 16 + i * dim * 4, dim);
    },
  };
}

// ---- index files ("AEON") ---------------------------------------------------

export interface AtlasHeader extends GenerationHeader {
  dim: number;
  metaSize: number;
  quant: number;
  branching: number;
  nodeCount: number;
  rootSlot: bigint;
  stride: number;
  depth: number;
}

export function alignUp(n: number, a: number): number {
  return Math.ceil(n / a) * a;
}

export function nodeStride(dim: number, quant: number, metaSize: number): number {
  const payload = quant === QUANT_FP32 ? dim * 4 : dim;
  return alignUp(64 + payload + metaSize, 64);
}

export class AtlasReader {
  readonly header: AtlasHeader;

  constructor(readonly buffer: ArrayBuffer) {
    expectMagic(buffer, MAGIC.atlas, "atlas");
    const dv = new DataView(buffer);
    const header: AtlasHeader = {
      ...readGenerationHeader(buffer),
      dim: dv.getUint32(24, true),
      metaSize: dv.getUint32(28, true),
      quant: dv.getUint32(32, true),
      branching: dv.getUint32(36, true),
      nodeCount: Number(dv.getBigUint64(40, true)),
      rootSlot: dv.getBigUint64(48, true),
      stride: Number(dv.getBigUint64(56, true)),
      depth: dv.getUint32(64, true),
    };
    // the format is self-describing: recompute and verify the stride
    const expected = nodeStride(header.dim, header.quant, header.metaSize);
    if (header.stride !== expected) {
      throw new RangeError(`stride ${header.stride} != recomputed ${expected}`);
    }
    this.header = header;
  }

  private base(slot: number): number {
    if (slot < 0 || slot >= this.header.nodeCount) {
      throw new RangeError(`slot ${slot} out of range`);
    }
    return HEADER_SIZE + slot * this.header.stride;
  }

  id(slot: number): bigint {
    return new DataView(this.buffer).getBigUint64(this.base(slot), true);
  }

  flags(slot: number): number {
    return new DataView(this.buffer).getUint32(this.base(slot) + 8, true);
  }

  tombstoned(slot: number): boolean {
    return (this.flags(slot) & 1) !== 0;
  }

  childCount(slot: number): number {
    return new DataView(this.buffer).getUint32(this.base(slot) + 12, true);
  }

  scale(slot: number): number {
    return new DataView(this.buffer).getFloat32(this.base(slot) + 24, true);
  }

  hubPenalty(slot: number): number {
    return new DataView(this.buffer).getFloat32(this.base(slot) + 28, true);
  }

  /** Zero-copy vector payload view (f32[dim] or i8[dim] depending on quant). */
  vector(slot: number): Float32Array | Int8Array {
    const off = this.base(slot) + 64;
    return this.header.quant === QUANT_FP32
      ? f32View(this.buffer, off, this.header.dim)
      : i8View(this.buffer, off, this.header.dim);
  }

  /** Zero-copy child table view: 64 x u32 slot indices, 0xFFFFFFFF = unused. */
  childTable(slot: number): Uint32Array {
    const payload = this.header.quant === QUANT_FP32 ? this.header.dim * 4 : this.header.dim;
    const off = this.base(slot) + 64 + payload;
    return readonlyView(new Uint32Array(this.buffer, off, 64));
  }
}

// ---- trace event files ("AEOT") ---------------------------------------------

export interface BlobRef {
  offset: number;
  size: number;
  generation: number;
}

export interface TraceEvent {
  eventId: bigint;
  kind: number;
  tombstoned: boolean;
  timestampUs: bigint;
  prevId: bigint;
  nextId: bigint;
  blobRef: BlobRef;
  refIds: bigint[];
  /** Zero-copy preview bytes (never touches the blob arena). */
  preview: Uint8Array;
}

export class TraceReader {
  readonly dim: number;
  readonly eventCount: number;

  constructor(readonly buffer: ArrayBuffer) {
    expectMagic(buffer, MAGIC.events, "trace");
    const dv = new DataView(buffer);
    this.dim = dv.getUint32(24, true);
    this.eventCount = Number(dv.getBigUint64(28, true));
  }

  event(slot: number): TraceEvent {
    if (slot < 0 || slot >= this.eventCount) {
      throw new RangeError(`event slot ${slot} out of range`);
    }
    const base = HEADER_SIZE + slot * EVENT_SIZE;
    const dv = new DataView(this.buffer, base, EVENT_SIZE);
    const refIds: bigint[] = [];
    for (let i = 0; i < 16; i++) {
      const r = dv.getBigUint64(64 + 8 * i, true);
      if (r !== 0n) refIds.push(r);
    }
    const blobSize = dv.getUint32(48, true);
    const previewLen = Math.min(blobSize, 63);
    return {
      eventId: dv.getBigUint64(0, true),
      kind: dv.getUint32(8, true),
      tombstoned: (dv.getUint32(12, true) & 1) !== 0,
      timestampUs: dv.getBigUint64(16, true),
      prevId: dv.getBigUint64(24, true),
      nextId: dv.getBigUint64(32, true),
      blobRef: {
        offset: Number(dv.getBigUint64(40, true)),
        size: blobSize,
        generation: dv.getUint32(52, true),
      },
      refIds,
      preview: byteView(this.buffer, base + 192, previewLen),
    };
  }
}

export class EmbeddingReader {
  readonly dim: number;
  readonly count: number;

  constructor(readonly buffer: ArrayBuffer) {
    expectMagic(buffer, MAGIC.embeds, "embeddings");
    const dv = new DataView(buffer);
    this.dim = dv.getUint32(24, true);
    this.count = Number(dv.getBigUint64(28, true));
  }

  /** Zero-copy embedding view for event slot i. */
  embedding(i: number): Float32Array {
    if (i < 0 || i >= this.count) throw new RangeError(`embedding ${i} out of range`);
    return f32View(this.buffer, HEADER_SIZE + i * this.dim * 4, this.dim);
  }
}

export class BlobArenaReader {
  readonly generation: number;
  readonly usedBytes: number;

  constructor(readonly buffer: ArrayBuffer) {
    expectMagic(buffer, MAGIC.blobs, "blob arena");
    const h = readGenerationHeader(buffer);
    this.generation = h.generation;
    this.usedBytes = Number(h.usedBytes);
  }

  /** Zero-copy blob view; rejects refs from other generations. */
  blob(ref: BlobRef): Uint8Array {
    if (ref.generation !== this.generation) {
      throw new RangeError(
        `blob ref generation ${ref.generation} is not this arena's (${this.generation})`);
    }
    if (ref.offset + ref.size > this.usedBytes) {
      throw new RangeError("blob ref beyond used bytes");
    }
    return byteView(this.buffer, ref.offset, ref.size);
  }
}
