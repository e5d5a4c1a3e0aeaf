"""Dense float tensors with a reverse-mode tape.

Fused row kernels come from a compiled extension when available
(see :data:`BACKEND`), otherwise from numpy.
"""
from .core import (
    Tape,
    Tensor,
    add,
    astype,
    backward,
    exp,
    get_tape,
    is_grad_enabled,
    log,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sum_,
    transpose,
)
from .functional import concat, dropout, embedding, layer_norm, linear, log_softmax, matmul, softmax
from .kernels import BACKEND

__all__ = [
    "BACKEND", "Tape", "Tensor", "add", "astype", "backward", "concat", "dropout", "embedding", "exp",
    "get_tape", "is_grad_enabled", "layer_norm", "linear", "log", "log_softmax", "matmul", "mean", "mul",
    "no_grad", "relu", "reshape", "softmax", "sum_", "transpose",
]
