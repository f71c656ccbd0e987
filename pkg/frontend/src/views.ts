/**
 * Read-only, zero-copy typed views over engine-provided buffers.
 *
 * A view never copies payload bytes: its `.buffer` is the exact ArrayBuffer
 * the engine (or a response body) handed over, and `.byteOffset`/`.byteLength`
 * delimit the extent. Any attempt to write through the view throws.
 */

export type TypedArray = Float32Array | Int8Array | Uint8Array | Uint32Array
  | BigUint64Array;

const MUTATORS = new Set<string | symbol>([
  "set", "fill", "copyWithin", "sort", "reverse",
]);

const UNWRAP = Symbol("aeon.unwrap");

class ViewMutationError extends TypeError {
  constructor(op: string) {
    super(`view is read-only: ${op} rejected`);
    this.name = "ViewMutationError";
  }
}

/** Wrap a typed array so every mutation path throws (indexed writes included). */
export function readonlyView<T extends TypedArray>(target: T): T {
  return new Proxy(target, {
    set() {
      throw new ViewMutationError("element assignment");
    },
    defineProperty() {
      throw new ViewMutationError("defineProperty");
    },
    deleteProperty() {
      throw new ViewMutationError("delete");
    },
    get(t, prop) {
      if (prop === UNWRAP) {
        return t;
      }
      if (MUTATORS.has(prop)) {
        return () => {
          throw new ViewMutationError(String(prop));
        };
      }
      // methods need the real typed array as `this` to reach internal slots
      const value = Reflect.get(t, prop, t);
      return typeof value === "function" ? value.bind(t) : value;
    },
  }) as T;
}

/**
 * Borrow the raw typed array behind a read-only view (still zero-copy).
 *
 * Host APIs like TextDecoder brand-check their argument and reject proxies;
 * this is the explicit escape hatch for handing them the aliased bytes. The
 * borrow is for reading - the read-only contract of the view stands.
 */
export function unwrap<T extends TypedArray>(view: T): T {
  const raw = (view as unknown as Record<symbol, T>)[UNWRAP];
  return raw ?? view;
}

/** Decode a (read-only) byte view as text without copying the input bytes. */
export function decodeText(view: Uint8Array, encoding = "utf-8"): string {
  return new TextDecoder(encoding).decode(unwrap(view));
}

/** Zero-copy f32 view over an extent of `buffer`. */
export function f32View(buffer: ArrayBuffer, byteOffset = 0, length?: number): Float32Array {
  const n = length ?? (buffer.byteLength - byteOffset) / 4;
  return readonlyView(new Float32Array(buffer, byteOffset, n));
}

/** Zero-copy i8 view over an extent of `buffer`. */
export function i8View(buffer: ArrayBuffer, byteOffset = 0, length?: number): Int8Array {
  const n = length ?? buffer.byteLength - byteOffset;
  return readonlyView(new Int8Array(buffer, byteOffset, n));
}

/** Zero-copy byte view over an extent of `buffer`. */
export function byteView(buffer: ArrayBuffer, byteOffset = 0, length?: number): Uint8Array {
  const n = length ?? buffer.byteLength - byteOffset;
  return readonlyView(new Uint8Array(buffer, byteOffset, n));
}

/** True when `view` aliases `buffer` exactly at [byteOffset, byteOffset+byteLength). */
export function aliases(view: ArrayBufferView, buffer: ArrayBuffer,
                        byteOffset?: number, byteLength?: number): boolean {
  if (view.buffer !== buffer) return false;
  if (byteOffset !== undefined && view.byteOffset !== byteOffset) return false;
  if (byteLength !== undefined && view.byteLength !== byteLength) return false;
  return true;
}

/** Dequantize an int8 view into a fresh Float32Array (an explicit copy). */
export function dequantize(values: Int8Array, scale: number): Float32Array {
  const out = new Float32Array(values.length);
  for (let i = 0; i < values.length; i++) out[i] = values[i] * scale;
  return out;
}

/** Cosine similarity of two same-length vectors (inputs assumed normalized). */
export function dot(a: ArrayLike<number>, b: ArrayLike<number>): number {
  if (a.length !== b.length) throw new RangeError("length mismatch");
  let s = 0;
  for (let i = 0; i < a.length; i++) s += a[i] * b[i];
  return s;
}
