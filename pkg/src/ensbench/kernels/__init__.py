"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and imports cleanly.
Set ``ENSBENCH_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pure

BACKEND = "python"

if not os.environ.get("ENSBENCH_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pure
else:
    _impl = _pure

crps_values = _impl.crps_values
crps_values_grad = _impl.crps_values_grad
local_extrema = _impl.local_extrema
l96_rk4 = _impl.l96_rk4

__all__ = ["BACKEND", "crps_values", "crps_values_grad", "local_extrema", "l96_rk4"]
