"""Hot inner loops: density clustering, running median, Hampel filter.

The compiled extension is used when it was built; otherwise the NumPy
fallback is imported. Set ``CARTYIELD_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
if os.environ.get("CARTYIELD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

dbscan = _impl.dbscan
running_median = _impl.running_median
hampel = _impl.hampel
NOISE = _fallback.NOISE

__all__ = ["BACKEND", "NOISE", "dbscan", "hampel", "running_median"]
