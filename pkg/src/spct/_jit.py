"""Numba dispatch.

Hot kernels are written twice: a numba ``@njit`` loop version and a pure
numpy version. ``SPCT_NUMBA=0`` in the environment (or numba missing) selects
the numpy path everywhere. Both paths must produce identical results.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SPCT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` with numba (nogil, cached) when available.

    Without numba the function is returned untouched so it still runs, just
    slowly; callers normally pick the numpy twin instead via :func:`select`.
    """
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def select(numba_impl, numpy_impl, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    return numba_impl if use_numba else numpy_impl


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
