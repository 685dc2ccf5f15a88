"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``MVJAR_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("MVJAR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

furthest_sampling = _impl.furthest_sampling
group_points = _impl.group_points

__all__ = ["BACKEND", "furthest_sampling", "group_points"]
