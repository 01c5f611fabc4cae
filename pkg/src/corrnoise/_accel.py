"""Backend selection for the numeric kernels.

Set ``CORRNOISE_BACKEND=numpy`` to force the pure-numpy path. The default is
``numba`` when it imports cleanly, otherwise numpy.
"""
import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAS_NUMBA = False

_requested = os.environ.get("CORRNOISE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"CORRNOISE_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and HAS_NUMBA) else "numpy"


def njit(fn):
    """``numba.njit(cache=True, nogil=True)`` or identity when numba is missing."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
