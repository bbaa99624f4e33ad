"""Kernel backend selection.

The compiled extension is used when it imports cleanly; set
``AFFNET_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _fallback

if os.environ.get("AFFNET_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward

__all__ = ["BACKEND", "im2col", "col2im", "maxpool_forward", "maxpool_backward"]
