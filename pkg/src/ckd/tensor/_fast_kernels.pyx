# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row kernels. Same contracts as ``_ref_kernels``; accumulation in double."""
import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport exp, expf, log, sqrt


cdef inline double _exp(floating v) noexcept nogil:
    # single-precision exp for float32 rows vectorizes twice as wide
    if floating is float:
        return expf(v)
    return exp(v)



def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] y = out
    cdef double m, s, e
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, n):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(n):
                e = _exp(<floating>(x[i, j] - m))
                y[i, j] = <floating>e
                s += e
            s = 1.0 / s
            for j in range(n):
                y[i, j] = <floating>(y[i, j] * s)
    return out


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    out = np.empty((rows, n), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] gx = out
    cdef double dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(n):
                dot += gy[i, j] * y[i, j]
            for j in range(n):
                gx[i, j] = <floating>(y[i, j] * (gy[i, j] - dot))
    return out


def log_softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] y = out
    cdef double m, s
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, n):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(n):
                s += _exp(<floating>(x[i, j] - m))
            s = m + log(s)
            for j in range(n):
                y[i, j] = <floating>(x[i, j] - s)
    return out


def log_softmax_bwd(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    out = np.empty((rows, n), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] gx = out
    cdef double s
    with nogil:
        for i in range(rows):
            s = 0.0
            for j in range(n):
                s += gy[i, j]
            for j in range(n):
                gx[i, j] = <floating>(gy[i, j] - _exp(y[i, j]) * s)
    return out


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    dtype = np.asarray(x).dtype
    out = np.empty((rows, n), dtype=dtype)
    xhat_arr = np.empty((rows, n), dtype=dtype)
    rstd_arr = np.empty(rows, dtype=dtype)
    cdef floating[:, ::1] y = out
    cdef floating[:, ::1] xh = xhat_arr
    cdef floating[::1] rs = rstd_arr
    cdef double mean, var, d, r, h
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var /= n
            r = 1.0 / sqrt(var + eps)
            rs[i] = <floating>r
            for j in range(n):
                h = (x[i, j] - mean) * r
                xh[i, j] = <floating>h
                y[i, j] = <floating>(h * gamma[j] + beta[j])
    return out, xhat_arr, rstd_arr


def layer_norm_bwd(floating[:, ::1] gy, floating[:, ::1] xhat, floating[::1] rstd, floating[::1] gamma):
    cdef Py_ssize_t rows = gy.shape[0], n = gy.shape[1], i, j
    dtype = np.asarray(gy).dtype
    gx_arr = np.empty((rows, n), dtype=dtype)
    cdef floating[:, ::1] gx = gx_arr
    cdef double[::1] gg = np.zeros(n, dtype=np.float64)
    cdef double[::1] gb = np.zeros(n, dtype=np.float64)
    cdef double a, b, g, scale
    with nogil:
        for i in range(rows):
            a = 0.0
            b = 0.0
            for j in range(n):
                g = gy[i, j] * gamma[j]
                a += g
                b += g * xhat[i, j]
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
            scale = rstd[i] / n
            for j in range(n):
                g = gy[i, j] * gamma[j]
                gx[i, j] = <floating>((g * n - a - xhat[i, j] * b) * scale)
    return gx_arr, np.asarray(gg).astype(dtype), np.asarray(gb).astype(dtype)
