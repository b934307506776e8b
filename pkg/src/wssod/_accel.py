"""Numba switch for the loop kernels.

Set ``WSSOD_DISABLE_NUMBA=1`` before import to run every kernel through its
pure numpy / interpreter fallback instead.
"""

import logging
import os

logger = logging.getLogger(__name__)

DISABLED = os.environ.get("WSSOD_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships in the test environment
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED

if DISABLED:
    logger.debug("numba disabled by WSSOD_DISABLE_NUMBA")
elif not HAVE_NUMBA:  # pragma: no cover
    logger.warning("numba not importable, falling back to numpy kernels")


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched."""
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def select(loop_impl, numpy_impl=None):
    """Pick the compiled loop kernel or its fallback.

    ``numpy_impl`` is the vectorised fallback; when absent the loop itself runs
    in the interpreter.
    """
    if USE_NUMBA:
        return njit(loop_impl)
    return numpy_impl if numpy_impl is not None else loop_impl
