"""Backend selection for the fused row kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation. Set ``CKD_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _ref_kernels as reference

if os.environ.get("CKD_PURE_PYTHON", "") not in ("", "0"):
    _impl = reference
    BACKEND = "numpy"
else:
    try:
        from . import _fast_kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = reference
        BACKEND = "numpy"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
