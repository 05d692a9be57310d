"""Slot-based video token connectors with a deterministic float32 training harness."""

import os

# SFSL_THREADS caps BLAS parallelism; the determinism guarantees hold at 1.
# Must be exported before numpy first loads its BLAS backend, so this module
# should be imported early in any entry point.
_threads = os.environ.setdefault("SFSL_THREADS", "1")
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
