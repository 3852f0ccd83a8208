"""Numba switch for the hot kernels.

``REPLAYGUARD_NUMBA=0`` forces the pure-numpy path; otherwise numba is used
when it imports.  The flag is read once at import time.
"""

from __future__ import annotations

import os
from contextlib import nullcontext

from threadpoolctl import threadpool_limits

_flag = os.environ.get("REPLAYGUARD_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and _flag not in {"0", "false", "no", "off"}


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``; identity decorator when numba is off."""
    kwargs.setdefault("cache", True)
    if _numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return _numba.njit(*args, **kwargs)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def blas_threads(deterministic: bool):
    """Pin BLAS to one thread when bit-identical reruns are wanted.

    Multi-threaded BLAS may split reductions differently from run to run; the
    numba kernels are serial and always sum in a fixed order.
    """
    return threadpool_limits(limits=1, user_api="blas") if deterministic else nullcontext()
