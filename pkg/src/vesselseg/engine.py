"""Global execution mode for the numerical core.

Two modes:

* ``deterministic`` -- fixed reduction order, single-threaded contractions.
  Results are bitwise reproducible and independent of the machine's thread
  count.  This is the default and the mode required by the reproducibility
  contracts (identical checkpoints across runs, idempotent inference).
* ``fast`` -- contractions are lowered to BLAS matmul, which may reorder
  reductions and use multiple threads.  Results may differ from the
  deterministic mode in the last bits only.
"""

from __future__ import annotations

import os

import threadpoolctl

DETERMINISTIC = "deterministic"
FAST = "fast"

THREADS_ENV = "VESSELSEG_THREADS"

_mode = DETERMINISTIC
_thread_limiter = None


def set_mode(mode: str) -> None:
    global _mode
    if mode not in (DETERMINISTIC, FAST):
        raise ValueError(f"unknown engine mode {mode!r}")
    _mode = mode


def get_mode() -> str:
    return _mode


def deterministic() -> bool:
    return _mode == DETERMINISTIC


def set_threads(n: int | None) -> None:
    """Cap BLAS/FFT worker threads for the whole process.

    ``None`` removes the cap.  Only the fast mode is affected; deterministic
    mode never spawns compute threads.
    """
    global _thread_limiter
    if _thread_limiter is not None:
        _thread_limiter.unregister()
        _thread_limiter = None
    if n is not None:
        if n < 1:
            raise ValueError("thread count must be >= 1")
        _thread_limiter = threadpoolctl.threadpool_limits(limits=int(n))


def threads_from_env() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    return int(raw)


class mode:
    """Context manager that temporarily switches the engine mode."""

    def __init__(self, m: str):
        self._m = m
        self._saved = None

    def __enter__(self):
        self._saved = get_mode()
        set_mode(self._m)
        return self

    def __exit__(self, *exc):
        set_mode(self._saved)
        return False
