"""Sparse voxel radiance fields with per-object 3D style transfer."""

import os

# honor the thread cap before numpy spins up a BLAS pool; the grid
# kernels themselves are sequential (deterministic accumulation)
_threads = os.environ.get("S2RF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

__version__ = "0.1.0"

from . import kernels

KERNEL_BACKEND = kernels.BACKEND_NAME

__all__ = ["KERNEL_BACKEND", "__version__"]
