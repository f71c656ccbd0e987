"""Similarity math primitives: FP32 dot, symmetric INT8 quantization, INT8 dot.

All vectors are expected to be L2-normalized at ingestion, which makes the
inner product equal to cosine similarity. Quantization is symmetric around
zero into [-127, 127] (-128 never appears) with one FP32 scale per vector.

The scalar formulas here are the behavioral contract; the batched paths used
by the index (see atlas.py) must agree bit-exactly for integer math and
within 1e-5 for FP32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

# int32 accumulation is overflow-safe up to 4096 * 127 * 127 < 2**31
MAX_DIM = 4096

NORMALIZATION_TOL = 1e-4


@dataclass(frozen=True)
class QuantizedVector:
    """INT8 values in [-127, 127] plus the per-vector dequantization scale."""

    values: np.ndarray  # int8, shape (D,)
    scale: np.float32   # > 0; exactly 1.0 for an all-zero source vector

    def __len__(self) -> int:
        return len(self.values)


def as_fp32_vector(v, dim: int | None = None) -> np.ndarray:
    """Validate and coerce to a contiguous float32 vector."""
    arr = np.ascontiguousarray(v, dtype=np.float32)
    if arr.ndim != 1 or arr.size < 1:
        raise InvalidArgumentError(f"expected a 1-d vector, got shape {arr.shape}")
    if dim is not None and arr.size != dim:
        raise InvalidArgumentError(f"dimension mismatch: expected {dim}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("vector contains non-finite values")
    return arr


def is_normalized(v: np.ndarray, tol: float = NORMALIZATION_TOL) -> bool:
    return abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) <= tol


def normalize(v) -> np.ndarray:
    """L2-normalize into float32; zero vectors are rejected."""
    arr = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(arr)
    if n == 0.0:
        raise InvalidArgumentError("cannot normalize the zero vector")
    return np.ascontiguousarray(arr / n, dtype=np.float32)


def quantize(v) -> QuantizedVector:
    """Symmetric scalar quantization: scale = max|v_i| / 127, q_i = clamp(round(v_i / scale)).

    Rounding is half-away-from-zero (symmetric about zero, like the value range).
    An all-zero vector quantizes to zeros with scale exactly 1.0.
    """
    arr = as_fp32_vector(v)
    max_abs = np.float32(np.max(np.abs(arr)))
    if max_abs == 0.0:
        return QuantizedVector(np.zeros(arr.size, dtype=np.int8), np.float32(1.0))
    scale = max_abs / np.float32(127.0)
    if scale == 0.0:  # subnormal inputs underflow the f32 division
        scale = np.float32(np.finfo(np.float32).tiny)
    ratio = arr.astype(np.float64) / np.float64(scale)
    rounded = np.copysign(np.floor(np.abs(ratio) + 0.5), ratio)
    q = np.clip(rounded, -127, 127).astype(np.int8)
    return QuantizedVector(q, scale)


def dequantize(q: QuantizedVector) -> np.ndarray:
    """Reconstruct FP32 values: out_i = q_i * scale (error bound scale/2 per component)."""
    return q.values.astype(np.float32) * np.float32(q.scale)


def dot_fp32(a, b) -> float:
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def dot_int8(a: QuantizedVector, b: QuantizedVector) -> float:
    """Integer dot product with scale correction: f32(raw_dot) * (a.scale * b.scale).

    Accumulation is 32-bit (numpy int32 dot); safe for D <= 4096. The scales
    are multiplied together first so the result is bit-exactly symmetric.
    """
    if len(a.values) != len(b.values):
        raise InvalidArgumentError(f"length mismatch: {len(a.values)} vs {len(b.values)}")
    if len(a.values) > MAX_DIM:
        raise InvalidArgumentError(f"D > {MAX_DIM} would overflow the int32 accumulator")
    raw = np.dot(a.values.astype(np.int32), b.values.astype(np.int32))
    return float(np.float32(raw) * (np.float32(a.scale) * np.float32(b.scale)))


def raw_dot_int8(a: np.ndarray, b: np.ndarray) -> int:
    """The undequantized integer accumulation, exposed for instrumentation."""
    return int(np.dot(a.astype(np.int32), b.astype(np.int32)))
