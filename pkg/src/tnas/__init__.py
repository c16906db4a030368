"""Tree-supernet architecture search for single-image super-resolution.

A self-contained engine that searches a super-resolution network at three
granularities (path depth, per-cell operation, per-kernel width) by
continuous relaxation with sparse simplex projections, trains it by
distillation against an analytic teacher, and derives compact architectures
with exact parameter and FLOPs accounting.
"""

__version__ = "0.1.0"

import os as _os

# Desk-scale tensors are tiny; threaded BLAS only adds overhead and a
# nondeterministic summation order. Pin to one thread unless the user
# already chose. Must happen before numpy loads its BLAS.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from . import dataio, derive, engine, ndgraph, projections, searchspace
from .engine import SearchConfig

__all__ = [
    "__version__",
    "dataio",
    "derive",
    "engine",
    "ndgraph",
    "projections",
    "searchspace",
    "SearchConfig",
]
