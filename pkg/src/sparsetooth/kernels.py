"""Hot-loop dispatch: the Cython extension when built, NumPy otherwise.

Set ``SPARSETOOTH_PURE_PYTHON=1`` to force the fallback (used by the
equivalence tests and the benchmark).
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("SPARSETOOTH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py


def splat_zbuffer(u, v, depth, valid, height, width, radius, impl=None):
    """Per-pixel nearest splat. Returns ``(depth_buffer, point_index)``."""
    impl = impl or _impl
    return impl.splat_zbuffer(
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        np.ascontiguousarray(depth, dtype=np.float64),
        np.ascontiguousarray(valid, dtype=np.uint8),
        int(height), int(width), int(radius),
    )


def knn_query(ref, query, k, impl=None):
    """k nearest rows of ``ref`` for each row of ``query``, ordered by (distance, index)."""
    impl = impl or _impl
    return impl.knn_query(
        np.ascontiguousarray(ref, dtype=np.float64),
        np.ascontiguousarray(query, dtype=np.float64),
        int(k),
    )
