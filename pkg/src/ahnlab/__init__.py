"""Sliding-window attention with recurrent compression of evicted KV pairs, at toy scale."""
import os as _os

# AHNLAB_THREADS caps BLAS/OpenMP/numba parallelism; it must be set before numpy loads its BLAS
_threads = _os.environ.get("AHNLAB_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
