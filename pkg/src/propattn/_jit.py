"""Numba switch.

Set ``PROPATTN_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels everywhere. Both paths stay importable so they can be compared.
"""
import functools
import os

_DISABLED = os.environ.get("PROPATTN_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba as nb
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED


def njit(fn):
    """``numba.njit`` with cache/nogil on, or the plain function when numba is absent."""
    if not HAS_NUMBA:
        return fn
    return functools.partial(nb.njit, cache=True, nogil=True)(fn)
