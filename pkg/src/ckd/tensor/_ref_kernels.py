"""Pure numpy row kernels. Reference and fallback for ``_fast_kernels``.

Every kernel operates on a C-contiguous 2-D array whose rows are independent
(``rows x n``) and returns fresh arrays of the input dtype.
"""
import numpy as np


def softmax_fwd(x):
    y = x - x.max(axis=1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def log_softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def log_softmax_bwd(y, gy):
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def layer_norm_fwd(x, gamma, beta, eps):
    """Returns (out, xhat, rstd); rstd has shape (rows,)."""
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].astype(x.dtype)


def layer_norm_bwd(gy, xhat, rstd, gamma):
    """Returns (gx, ggamma, gbeta)."""
    n = xhat.shape[1]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    a = gxhat.sum(axis=1, keepdims=True)
    b = (gxhat * xhat).sum(axis=1, keepdims=True)
    gx = (gxhat * n - a - xhat * b) * (rstd[:, None] / n)
    return gx.astype(xhat.dtype, copy=False), ggamma, gbeta
