"""Kernel backend selection.

The hot compositing kernels exist twice: a numba ``@njit`` version and a
vectorized pure-numpy version. ``SPLATLOC_BACKEND`` picks one at import time
(``numba`` or ``numpy``); ``SPLATLOC_DISABLE_NUMBA=1`` is accepted as a
shorthand for the numpy path. If numba cannot be imported the numpy path is
used regardless.
"""

import os

# omp is safe to enter from several Python threads at once (benchmark worker pool)
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False


def _requested_backend():
    if os.environ.get("SPLATLOC_DISABLE_NUMBA", "").strip() not in ("", "0"):
        return "numpy"
    name = os.environ.get("SPLATLOC_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"SPLATLOC_BACKEND must be 'numba' or 'numpy', got {name!r}")
    return name


BACKEND = _requested_backend() if HAVE_NUMBA else "numpy"


def set_num_threads(n):
    """Clamp ``n`` to what numba was started with and apply it. Returns the value used."""
    if not HAVE_NUMBA or n is None:
        return 1
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
