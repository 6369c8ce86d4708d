"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. ``HETFUSE_BACKEND=python`` forces the fallback (useful
for benchmarking and for checking that both paths agree).
"""

import os

import numpy as np

from . import _fallback

if os.environ.get("HETFUSE_BACKEND", "").lower() == "python":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def marginalize_info(lam, zeta, keep, drop):
    return _impl.marginalize_info(np.ascontiguousarray(lam, dtype=float),
                                  np.ascontiguousarray(zeta, dtype=float),
                                  np.ascontiguousarray(keep, dtype=np.intp),
                                  np.ascontiguousarray(drop, dtype=np.intp))


scatter_add = _impl.scatter_add
RCOND_MIN = _fallback.RCOND_MIN

__all__ = ["BACKEND", "RCOND_MIN", "marginalize_info", "scatter_add"]
