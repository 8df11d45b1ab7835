"""Kernel dispatch between numba-jitted loops and pure-numpy fallbacks.

Hot inner kernels (resampling, tap scatter, table lookup) exist in two
equivalent implementations. The numba one wins on large images; the numpy
one keeps the package importable without a working JIT and is what the
test suite diffs against. Set IQLUT_PURE_NUMPY=1 to force the numpy path.
"""

import os

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


PURE_NUMPY = os.environ.get("IQLUT_PURE_NUMPY", "0") not in ("", "0")
NUMBA_ENABLED = HAVE_NUMBA and not PURE_NUMPY


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
