"""Hot inner loops, backed by numba when available.

Set ``PIXBIS_DISABLE_NUMBA=1`` before import to force the pure-numpy path.
``BACKEND`` names the implementation in use.
"""

import os

from . import _numpy as numpy_impl

numba_impl = None
if os.environ.get("PIXBIS_DISABLE_NUMBA", "").strip().lower() not in ("1", "true", "yes"):
    try:
        from . import _numba as numba_impl
    except ImportError:  # pragma: no cover - numba missing
        numba_impl = None

_impl = numba_impl if numba_impl is not None else numpy_impl
BACKEND = "numba" if numba_impl is not None else "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
lbp_codes = _impl.lbp_codes

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "lbp_codes",
    "numpy_impl",
    "numba_impl",
]
