"""Kernel backend selection.

The compiled extension is used when importable; set ``NOWCAST_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

if os.environ.get("NOWCAST_PURE_PYTHON"):
    from nowcast import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from nowcast import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        from nowcast import _kernels_py as _impl

        BACKEND = "python"

crps_sum = _impl.crps_sum
spread_error_sums = _impl.spread_error_sums
contingency = _impl.contingency
class_weights = _impl.class_weights

__all__ = ["BACKEND", "crps_sum", "spread_error_sums", "contingency", "class_weights"]
