"""Kernel backend selection.

The hot loops in :mod:`anchorset.kernels` are compiled with numba when it is
importable. Setting ``ANCHORSET_DISABLE_NUMBA=1`` forces the pure-numpy
fallbacks, which produce the same results.
"""
import os

_DISABLE = os.environ.get("ANCHORSET_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLE:
        raise ImportError("numba disabled by ANCHORSET_DISABLE_NUMBA")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def njit(fn):
    """Compile ``fn`` in nopython mode, or return None when numba is off."""
    if not HAS_NUMBA:
        return None
    # fastmath stays off: both backends must agree bit for bit
    return numba.njit(cache=True, nogil=True)(fn)
