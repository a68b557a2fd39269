"""Kernel backend selection.

Two implementations of the convolution kernels exist: numba-jitted direct
loops and a pure-numpy im2col path. The active backend is chosen once at
import time from the MMFORECAST_BACKEND environment variable:

    MMFORECAST_BACKEND=numba   force numba (error if unavailable)
    MMFORECAST_BACKEND=numpy   force the im2col/BLAS path
    unset                      numpy

numpy is the default: on this workload the im2col + BLAS matmul path beats
the jitted scalar loops by a wide margin on a single core (see
benchmarks/bench_kernels.py for numbers on your machine). Both backends
produce the same results; tests assert agreement to ~1e-10.
"""

import os

try:
    import numba  # noqa: F401
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

_requested = os.environ.get("MMFORECAST_BACKEND", "").strip().lower()

if _requested == "numba":
    if not HAS_NUMBA:
        raise ImportError("MMFORECAST_BACKEND=numba but numba is not installed")
    BACKEND = "numba"
elif _requested == "numpy":
    BACKEND = "numpy"
elif _requested == "":
    BACKEND = "numpy"
else:
    raise ValueError(f"unknown MMFORECAST_BACKEND={_requested!r} (expected 'numba' or 'numpy')")


def use_numba() -> bool:
    return BACKEND == "numba"
