"""Instrumented locks proving the log lock and the delta lock are never co-held.

The WAL protocol's whole point is that disk flushes (log lock) and RAM delta
mutation (delta lock) never contend on the same mutex. TrackedLock records,
per thread, which named locks are held; acquiring one member of a conflict
pair while holding the other bumps a global violation counter that the test
suite asserts stays at zero.
"""

from __future__ import annotations

import threading

_state = threading.local()

# (a, b) pairs that must never be co-held, plus a violation count
_conflicts: set[frozenset[str]] = set()
_violations: dict[frozenset[str], int] = {}
_registry_lock = threading.Lock()


def declare_conflict(name_a: str, name_b: str) -> None:
    pair = frozenset((name_a, name_b))
    with _registry_lock:
        _conflicts.add(pair)
        _violations.setdefault(pair, 0)


def violation_count(name_a: str, name_b: str) -> int:
    return _violations.get(frozenset((name_a, name_b)), 0)


def _held() -> set[str]:
    held = getattr(_state, "held", None)
    if held is None:
        held = set()
        _state.held = held
    return held


class TrackedLock:
    """threading.Lock wrapper that knows its name and checks conflict pairs."""

    def __init__(self, name: str):
        self.name = name
        self._lock = threading.Lock()

    def acquire(self) -> None:
        self._lock.acquire()
        held = _held()
        for other in held:
            pair = frozenset((self.name, other))
            if pair in _conflicts:
                with _registry_lock:
                    _violations[pair] = _violations.get(pair, 0) + 1
        held.add(self.name)

    def release(self) -> None:
        _held().discard(self.name)
        self._lock.release()

    def locked(self) -> bool:
        return self._lock.locked()

    def held_by_me(self) -> bool:
        return self.name in _held()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()
        return False
