"""Numba dispatch.

Hot kernels are written once as plain Python loops and compiled with
``numba.njit`` when numba is importable and ``FGN_DISABLE_NUMBA`` is not set
to a truthy value.  Every such kernel also has a vectorized numpy twin in
:mod:`fgn.kernels`; ``USE_NUMBA`` decides which one the public wrappers call.
"""

import os

_flag = os.environ.get("FGN_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("disabled by FGN_DISABLE_NUMBA")
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:
    _njit = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE


def njit(fn):
    """Compile ``fn`` in nopython mode, or return it untouched."""
    if _njit is None:
        return fn
    return _njit(cache=True, nogil=True)(fn)
