"""Kernel acceleration switch.

The hot graph-traversal loops in :mod:`semretrieve.ann.kernels` are written in
nopython style and normally compiled with numba. Setting
``SEMRETRIEVE_DISABLE_NUMBA=1`` (or running without numba installed) leaves
them as plain Python over numpy arrays: much slower, but executing the exact
same arithmetic in the same order, so results are bit-identical across the
two paths. ``benchmarks/bench_kernels.py`` measures the gap.
"""

import os

DISABLE_FLAG = "SEMRETRIEVE_DISABLE_NUMBA"


def _numba_enabled() -> bool:
    if os.environ.get(DISABLE_FLAG, "").strip() not in ("", "0"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


NUMBA_ENABLED = _numba_enabled()

if NUMBA_ENABLED:
    from numba import njit
else:

    def njit(*args, **kwargs):
        """Transparent no-op replacement for numba.njit."""
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrapper(func):
            return func

        return wrapper
