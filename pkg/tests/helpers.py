"""Finite-difference machinery shared by the gradient tests."""
import numpy as np

from ckd import tensor as T


def numeric_grad(fn, arr, idx, h=1e-3):
    """Central difference of scalar ``fn()`` w.r.t. ``arr[idx]`` (mutates in place, then restores)."""
    old = arr[idx]
    arr[idx] = old + h
    up = fn()
    arr[idx] = old - h
    down = fn()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grads(build, tensors, n_samples=None, h=1e-3, rng=None):
    """Compare analytic gradients of ``build()`` with central differences.

    ``build`` returns a scalar Tensor from ``tensors`` (float64 leaves).
    Returns the list of relative errors for every checked element.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = build()
    T.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value():
        with T.no_grad():
            return float(build().item())

    errors = []
    for t, g in zip(tensors, analytic):
        indices = list(np.ndindex(t.shape))
        if n_samples is not None and len(indices) > n_samples:
            picks = rng.choice(len(indices), size=n_samples, replace=False)
            indices = [indices[i] for i in picks]
        for idx in indices:
            errors.append(rel_error(g[idx], numeric_grad(value, t.data, idx, h)))
    return errors


def random_pad(rng, b, t):
    """Padding mask with at least one real token per row, pads at the end."""
    lengths = rng.integers(1, t + 1, size=b)
    return np.arange(t)[None, :] >= lengths[:, None]


def random_loss_case(rng):
    """Small random inputs for every loss: B<=2, T<=4, V<=6, d<=4, layers<=3."""
    b = int(rng.integers(1, 3))
    t = int(rng.integers(1, 5))
    v = int(rng.integers(2, 7))
    d = int(rng.integers(1, 5))
    heads = int(rng.integers(1, 3))
    n_t = int(rng.integers(1, 4))
    n_s = int(rng.integers(1, n_t + 1))
    mapping = []
    for _ in range(n_s):
        k = int(rng.integers(1, n_t + 1))
        mapping.append(tuple(sorted(int(x) for x in rng.choice(np.arange(1, n_t + 1), size=k, replace=False))))
    single = [(int(rng.integers(1, n_t + 1)),) for _ in range(n_s)]

    def attn_maps(n):
        maps = []
        for _ in range(n):
            raw = rng.normal(size=(b, heads, t, t))
            e = np.exp(raw)
            maps.append((e / e.sum(-1, keepdims=True)).astype(np.float32))
        return maps

    return {
        "pad": random_pad(rng, b, t),
        "logits": (rng.normal(size=(b, t, v)) * 2).astype(np.float32),
        "teacher_logits": (rng.normal(size=(b, t, v)) * 2).astype(np.float32),
        "targets": rng.integers(0, v, size=(b, t)),
        "eps": float(rng.choice([0.0, 0.1, 0.3])),
        "student": [rng.normal(size=(b, t, d)).astype(np.float32) for _ in range(n_s)],
        "teacher": [rng.normal(size=(b, t, d)).astype(np.float32) for _ in range(n_t)],
        "mapping": mapping,
        "single": single,
        "n_t": n_t,
        "weights": [rng.normal(size=(d, len(m) * d)).astype(np.float32) for m in mapping],
        "biases": [rng.normal(size=(d,)).astype(np.float32) for _ in mapping],
        "student_attn": attn_maps(n_s),
        "teacher_attn": attn_maps(n_t),
    }
