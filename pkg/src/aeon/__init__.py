"""Embeddable storage engine for long-horizon agent memory.

Core pieces: a hierarchical quantized vector index over memory-mapped
generation files, an episodic trace with block-indexed semantic search, a
write-ahead log for crash recovery, a sidecar blob arena with generational
GC, a sharded semantic cache, and stutter-free background compaction.
"""

from .atlas import QUANT_FP32, QUANT_INT8, SearchResult
from .engine import LookupResult, MemoryEngine
from .errors import (AeonError, DurabilityError, GoneError, InvalidArgumentError,
                     NotFoundError, StorageError)
from .kernels import QuantizedVector, dequantize, dot_fp32, dot_int8, normalize, quantize

__version__ = "0.1.0"

__all__ = [
    "MemoryEngine", "LookupResult", "SearchResult",
    "QUANT_FP32", "QUANT_INT8",
    "QuantizedVector", "quantize", "dequantize", "dot_fp32", "dot_int8", "normalize",
    "AeonError", "InvalidArgumentError", "StorageError", "DurabilityError",
    "NotFoundError", "GoneError",
]
