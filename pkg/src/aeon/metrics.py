"""Machine-readable benchmark report.

Every benchmark runs five repetitions and reports the median wall time plus
hardware-independent counters (comparisons, hops, bytes, lock-section op
counts). Acceptance gates bind only to the counters and ratios; wall clocks
are informational and machine-specific.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from typing import Callable

DEFAULT_REPEATS = 5


@dataclass
class BenchRecord:
    name: str
    params: dict
    repeats: int
    wall_s: list[float]
    counters: dict

    @property
    def median_s(self) -> float:
        return statistics.median(self.wall_s) if self.wall_s else 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "repeats": self.repeats,
            "wall_s": self.wall_s,
            "median_s": self.median_s,
            "counters": self.counters,
        }


class MetricsReport:
    def __init__(self):
        self.records: list[BenchRecord] = []

    def add(self, name: str, params: dict, wall_s: list[float], counters: dict) -> BenchRecord:
        rec = BenchRecord(name, params, len(wall_s), wall_s, counters)
        self.records.append(rec)
        return rec

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump({"records": [r.to_dict() for r in self.records]}, f, indent=2)

    @staticmethod
    def load(path: str) -> dict:
        with open(path) as f:
            return json.load(f)


def timed(fn: Callable, repeats: int = DEFAULT_REPEATS) -> tuple[list[float], object]:
    """Run `fn` `repeats` times; returns (wall samples, last result)."""
    walls = []
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        walls.append(time.perf_counter() - t0)
    return walls, result


def percentiles(samples_s: list[float]) -> dict:
    if not samples_s:
        return {"p50_us": 0.0, "p99_us": 0.0, "mean_us": 0.0}
    xs = sorted(samples_s)
    def pct(p):
        return xs[min(len(xs) - 1, int(p * len(xs)))] * 1e6
    return {
        "p50_us": pct(0.50),
        "p99_us": pct(0.99),
        "mean_us": statistics.fmean(xs) * 1e6,
    }
