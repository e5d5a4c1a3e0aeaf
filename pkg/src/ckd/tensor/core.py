"""Tensor carrier and the reverse-mode tape.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients append a node to the calling thread's :class:`Tape`; ``backward``
walks the tape once in reverse and then resets it.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32


class Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations; inputs always precede outputs."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, out, inputs, backward_fn):
        self.nodes.append(Node(out, inputs, backward_fn))

    def reset(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def get_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(value, dtype=None):
    if isinstance(value, Tensor):
        value = value.data
    if not isinstance(value, np.ndarray):
        value = np.asarray(value, dtype=dtype or DEFAULT_DTYPE)
    arr = value
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense array with optional participation in the gradient tape.

    Tensors created directly are leaves; their ``grad`` is populated by
    :func:`backward` when ``requires_grad`` is set. Tensors produced by
    operations never keep a ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def backward(self):
        backward(self)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        from .functional import matmul

        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _wrap(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def make_result(data, inputs, backward_fn):
    """Create an op output and record it on the tape when needed.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    out.name = None
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        _state.tape.record(out, inputs, backward_fn)
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf that contributed to ``loss``.

    The tape is reset afterwards, so a graph can be differentiated once.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss._leaf:
        loss.grad = np.ones_like(loss.data)
        return
    nodes = tape.nodes
    if not nodes or not any(n.out is loss for n in reversed(nodes)):
        raise ContractError("loss is not on the current tape (already consumed?)")
    grads = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise DimensionError(f"internal: grad shape {gi.shape} != tensor shape {t.shape}")
                if t._leaf:
                    gi = gi.astype(t.dtype, copy=False)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
    finally:
        tape.reset()


# elementwise and reduction ops


def add(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw)


def neg(a):
    a = _wrap(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        if not isinstance(a, Tensor):
            a = _wrap(a)
        c = np.asarray(b, dtype=a.dtype)
        return make_result(a.data * c, (a,), lambda g: (unbroadcast(g * c, a.shape),))
    a = _wrap(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw)


def reciprocal(a):
    y = 1.0 / a.data
    return make_result(y, (a,), lambda g: (-g * y * y,))


def exp(a):
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,))


def log(a):
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,))


def relu(a):
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def astype(a, dtype):
    src = a.dtype
    return make_result(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),)
    )


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.ascontiguousarray(a.data[idx]), (a,), bw)
