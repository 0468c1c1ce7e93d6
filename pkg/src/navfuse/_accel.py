"""Numba switch.

Hot kernels are written once as plain loops and compiled with ``numba.njit``
when numba is importable and ``NAVFUSE_NO_NUMBA`` is unset (or "0").  With the
flag set, the pure numpy fallback implementations in :mod:`navfuse.kernels`
are used instead.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("NAVFUSE_NO_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _FLAG in ("", "0", "false", "no")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = NUMBA_REQUESTED and _numba is not None


def njit(fn):
    """Compile ``fn`` with numba if available, else return it untouched."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
