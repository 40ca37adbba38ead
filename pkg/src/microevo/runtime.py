"""Thread control and a deterministic execution mode.

BLAS reductions may change summation order with the thread count, so the
deterministic mode pins every native thread pool to one thread. All library
code already draws randomness from explicit seeded generators.
"""

from __future__ import annotations

import contextlib
import os

from threadpoolctl import threadpool_limits

_state = {"deterministic": False, "limiter": None}


def set_threads(n: int | None) -> None:
    """Limit native (BLAS/OpenMP) thread pools to ``n`` threads for the rest of the process."""
    if n is None:
        return
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _state["limiter"] = threadpool_limits(limits=n)


def is_deterministic() -> bool:
    return _state["deterministic"]


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Run the block single-threaded so floating-point reductions repeat bit for bit."""
    if not enabled:
        yield
        return
    old = _state["deterministic"]
    _state["deterministic"] = True
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        _state["deterministic"] = old


def environment_summary() -> dict:
    return {"deterministic": is_deterministic(), "cpu_count": os.cpu_count()}
