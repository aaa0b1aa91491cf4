"""Numba switch shared by the hot kernels.

Set ``VQNQS_NUMBA=0`` to force the pure-numpy code paths (numba is also
skipped automatically when it cannot be imported).
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("VQNQS_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba when available, else return it unchanged."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
