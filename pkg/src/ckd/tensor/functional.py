"""Neural-network primitives with hand-written backward rules."""
from __future__ import annotations

import numpy as np

from ..errors import DataError, DimensionError, NumericError
from . import kernels
from .core import Tensor, make_result, relu, unbroadcast  # noqa: F401


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    w = weight.data
    y = x2 @ w.T
    if bias is not None:
        y += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(y.reshape(*lead, w.shape[0]), inputs, bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    shape = x.shape
    y = kernels.softmax_fwd(_rows(x.data))

    def bw(g):
        return (kernels.softmax_bwd(y, _rows(g)).reshape(shape),)

    return make_result(y.reshape(shape), (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax: non-finite input")
    shape = x.shape
    y = kernels.log_softmax_fwd(_rows(x.data))

    def bw(g):
        return (kernels.log_softmax_bwd(y, _rows(g)).reshape(shape),)

    return make_result(y.reshape(shape), (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs width {d}")
    shape = x.shape
    dt = x.dtype
    gdata = np.ascontiguousarray(gamma.data, dtype=dt)
    y, xhat, rstd = kernels.layer_norm_fwd(_rows(x.data), gdata, np.ascontiguousarray(beta.data, dtype=dt), float(eps))

    def bw(g):
        gx, gg, gb = kernels.layer_norm_bwd(_rows(g), xhat, rstd, gdata)
        return gx.reshape(shape), gg.astype(gamma.dtype, copy=False), gb.astype(beta.dtype, copy=False)

    return make_result(y.reshape(shape), (x, gamma, beta), bw)


def concat(parts, axis=-1) -> Tensor:
    """Concatenate along the last axis; gradients are sliced back per part."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: empty list")
    if axis not in (-1, parts[0].ndim - 1):
        raise DimensionError("concat: only the last axis is supported")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat: leading shapes differ: {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        p = parts[0]
        return make_result(p.data.copy(), (p,), lambda g: (g,))
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def bw(g):
        return tuple(np.ascontiguousarray(g[..., bounds[i]:bounds[i + 1]]) for i in range(len(parts)))

    return make_result(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DataError(f"token id out of range [0, {vocab})")
    flat = ids.reshape(-1)

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, flat, g.reshape(-1, table.shape[1]))
        return (full,)

    return make_result(table.data[ids], (table,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


