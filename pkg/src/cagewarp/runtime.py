"""Process-wide runtime knobs (thread cap for nearest-neighbor queries)."""

from __future__ import annotations

_threads: int | None = None


def set_threads(n: int | None) -> None:
    """Cap internal parallelism; None/0 means use all available cores."""
    global _threads
    _threads = int(n) if n else None


def kdtree_workers() -> int:
    """Worker count for cKDTree queries (-1 = all cores)."""
    return _threads if _threads is not None else -1
