"""Hot-loop kernels: the compiled extension when it was built, else numpy.

Set ``BMAE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("BMAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

max_cosine_pool = _impl.max_cosine_pool
trim_counts = _impl.trim_counts
argmax_mid = _impl.argmax_mid
scatter_mid = _impl.scatter_mid
unit_rows = _kernels_py.unit_rows

__all__ = ["BACKEND", "argmax_mid", "max_cosine_pool", "scatter_mid", "trim_counts", "unit_rows"]
