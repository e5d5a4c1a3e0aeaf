"""Distillation objectives.

Component losses are means over non-pad tokens, so the interpolation weights
keep their meaning across batch shapes. Teacher tensors are always detached.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .mapper import LayerMapping, fusion_param_shapes
from .tensor import Tensor

METHODS = ("none", "rkd", "pkd", "ckd")


@dataclass(frozen=True)
class LossWeights:
    """Interpolation weights; ``beta`` is derived as ``1 - eta - lam``."""

    eta: float = 0.1
    lam: float = 0.7

    def __post_init__(self):
        for name in ("eta", "lam"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0 or not math.isfinite(value):
                raise ConfigError(f"must lie in [0, 1], got {value!r}", name)
        if self.beta < -1e-12:
            raise ConfigError(f"eta + lambda = {self.eta + self.lam} exceeds 1", "lambda")

    @property
    def beta(self) -> float:
        return 1.0 - self.eta - self.lam


@dataclass
class LossReport:
    hard: float
    soft: float
    layer: float
    attn: float | None
    total: float
    beta: float = 0.0
    eta: float = 0.0
    lam: float = 0.0

    def as_dict(self):
        return {"hard": self.hard, "soft": self.soft, "layer": self.layer, "attn": self.attn, "total": self.total}


@dataclass
class FusionParams:
    """One projection ``(W_i, b_i)`` per student layer, ``W_i`` of shape d x (k_i * d)."""

    weights: list[Tensor]
    biases: list[Tensor]
    frozen: bool = False

    @classmethod
    def init(cls, mapping: LayerMapping, d: int, dtype=np.float32, frozen=False, prefix="fusion"):
        """Scaled stacked identities, so the initial fused value is the mean of the selected layers."""
        weights, biases = [], []
        for i, ((rows, cols), (bd,)) in enumerate(fusion_param_shapes(mapping, d)):
            k = cols // rows
            w = np.tile(np.eye(d), (1, k)) / k
            weights.append(Tensor(w.astype(dtype), requires_grad=not frozen, name=f"{prefix}.{i}.weight"))
            biases.append(Tensor(np.zeros(bd, dtype=dtype), requires_grad=not frozen, name=f"{prefix}.{i}.bias"))
        return cls(weights, biases, frozen)

    def parameters(self) -> list[Tensor]:
        if self.frozen:
            return []
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def named_parameters(self):
        return [(t.name, t) for pair in zip(self.weights, self.biases) for t in pair]

    def __len__(self):
        return len(self.weights)


def _valid(pad_mask, shape):
    valid = ~np.asarray(pad_mask, dtype=bool)
    if valid.shape != tuple(shape):
        raise DimensionError(f"pad mask shape {valid.shape} does not match {tuple(shape)}")
    n = int(valid.sum())
    if n == 0:
        raise DataError("batch contains no non-pad tokens")
    return valid, n


def smoothed_targets(targets, vocab, smoothing, dtype=np.float32):
    targets = np.asarray(targets)
    dist = np.full(targets.shape + (vocab,), smoothing / vocab, dtype=np.float64)
    np.put_along_axis(dist, targets[..., None], 1.0 - smoothing + smoothing / vocab, axis=-1)
    return dist.astype(dtype)


def hard_loss(logits: Tensor, targets, pad_mask, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed negative log-likelihood, averaged over non-pad tokens."""
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise DataError(f"target id out of range [0, {vocab})")
    valid, n = _valid(pad_mask, logits.shape[:-1])
    weights = smoothed_targets(targets, vocab, smoothing, logits.dtype) * (valid[..., None] / n).astype(logits.dtype)
    return -(T.log_softmax(logits) * weights).sum()


def soft_loss(student_logits: Tensor, teacher_logits, pad_mask) -> Tensor:
    """Cross-entropy of the student against the teacher's output distribution."""
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if teacher.shape != student_logits.shape:
        raise DimensionError(f"student logits {student_logits.shape} vs teacher logits {teacher.shape}")
    valid, n = _valid(pad_mask, student_logits.shape[:-1])
    with T.no_grad():
        q = T.softmax(Tensor(teacher.astype(student_logits.dtype))).data
    weights = q * (valid[..., None] / n).astype(q.dtype)
    return -(T.log_softmax(student_logits) * weights).sum()


def fuse(teacher_layers, weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate detached teacher states along the width and project back to d."""
    layers = [t.detach() if isinstance(t, Tensor) else Tensor(t) for t in teacher_layers]
    d = layers[0].shape[-1]
    k = len(layers)
    if weight.shape != (d, k * d) or bias.shape != (d,):
        raise DimensionError(
            f"fusion weight {weight.shape} / bias {bias.shape} inconsistent with {k} layers of width {d}"
        )
    return T.linear(T.concat(layers), weight, bias)


def masked_mse(a: Tensor, b: Tensor, pad_mask) -> Tensor:
    """Mean squared difference over non-pad positions and all channels."""
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ: {a.shape} vs {b.shape}")
    valid, n = _valid(pad_mask, a.shape[:-1])
    diff = a - b
    w = (valid[..., None] / (n * a.shape[-1])).astype(a.dtype)
    return (diff * diff * w).sum()


def _check_mapping(mapping, n_student, n_teacher):
    if mapping is None or not isinstance(mapping, LayerMapping):
        raise ConfigError("a validated LayerMapping is required", "mapping")
    if len(mapping) != n_student or mapping.n_student != n_student:
        raise ConfigError(f"mapping has {len(mapping)} entries for {n_student} student layers", "mapping")
    if mapping.n_teacher != n_teacher or max(max(e) for e in mapping.entries) > n_teacher:
        raise ConfigError(f"mapping references teacher depth {mapping.n_teacher}, teacher has {n_teacher}", "mapping")


def layer_loss(student_hiddens, teacher_hiddens, mapping: LayerMapping, fusion: FusionParams | None, pad_mask) -> Tensor:
    """Sum over student layers of MSE against the fused teacher target.

    ``fusion=None`` compares against the raw teacher layer and requires a
    singleton mapping (plain layer-to-layer matching).
    """
    _check_mapping(mapping, len(student_hiddens), len(teacher_hiddens))
    d_s = student_hiddens[0].shape[-1]
    d_t = teacher_hiddens[mapping.entries[0][0] - 1].shape[-1]
    if d_s != d_t:
        raise DimensionError(f"student width {d_s} != teacher width {d_t}")
    total = None
    for i, (h_s, idx) in enumerate(zip(student_hiddens, mapping.entries)):
        chosen = [teacher_hiddens[j - 1] for j in idx]
        if fusion is None:
            if len(chosen) != 1:
                raise ConfigError("unfused matching needs a singleton mapping", "mapping")
            target = Tensor(chosen[0].data if isinstance(chosen[0], Tensor) else chosen[0])
        else:
            target = fuse(chosen, fusion.weights[i], fusion.biases[i])
        term = masked_mse(h_s, target, pad_mask)
        total = term if total is None else total + term
    return total


def attention_loss(student_attn, teacher_attn, mapping: LayerMapping, pad_mask) -> Tensor:
    """Mean over student layers of the MSE between attention maps on valid (query, key) pairs."""
    _check_mapping(mapping, len(student_attn), len(teacher_attn))
    if not mapping.is_singleton:
        raise ConfigError("attention matching needs a singleton mapping (maps cannot be fused)", "mapping")
    valid = ~np.asarray(pad_mask, dtype=bool)
    pair = valid[:, :, None] & valid[:, None, :]
    total = None
    for a_s, (j,) in zip(student_attn, mapping.entries):
        a_t = teacher_attn[j - 1]
        a_t = a_t.data if isinstance(a_t, Tensor) else np.asarray(a_t)
        if a_s.shape != a_t.shape:
            raise DimensionError(f"attention maps differ: {a_s.shape} vs {a_t.shape}")
        heads = a_s.shape[1]
        n = int(pair.sum()) * heads
        if n == 0:
            raise DataError("batch contains no valid attention pairs")
        w = np.broadcast_to((pair / n)[:, None], a_s.shape).astype(a_s.dtype)
        diff = a_s - Tensor(a_t.astype(a_s.dtype))
        term = (diff * diff * w).sum()
        total = term if total is None else total + term
    return total * (1.0 / len(student_attn))


def total_loss(hard, soft, layer, attn, weights: LossWeights):
    """Weighted sum in float64; returns (graph scalar, LossReport).

    Components may be Tensors, floats, or None (None counts as exactly 0).
    """
    def as64(x):
        if x is None:
            return None
        if isinstance(x, Tensor):
            return T.astype(x, np.float64)
        return Tensor(np.float64(x))

    parts = [(weights.beta, as64(hard)), (weights.eta, as64(soft)), (weights.lam, as64(layer)), (weights.lam, as64(attn))]
    graph = None
    for w, x in parts:
        if x is None or w == 0.0:
            continue
        term = x * w
        graph = term if graph is None else graph + term
    if graph is None:
        graph = Tensor(np.float64(0.0))

    def val(x):
        return 0.0 if x is None else float(x.item() if isinstance(x, Tensor) else x)

    h, s, l = val(hard), val(soft), val(layer)
    a = None if attn is None else val(attn)
    total = weights.beta * h + weights.eta * s + weights.lam * (l + (a or 0.0))
    report = LossReport(h, s, l, a, total, weights.beta, weights.eta, weights.lam)
    return graph, report


@dataclass
class DistillConfig:
    method: str = "ckd"
    eta: float = 0.1
    lam: float = 0.7
    mapping: LayerMapping | None = None
    attention_loss: bool = False
    decoder_mapping: LayerMapping | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}", "distill.method")
        if self.method == "none" and (self.eta or self.lam):
            raise ConfigError("method 'none' requires eta = lambda = 0", "distill.eta")
        if self.method == "rkd" and self.lam:
            raise ConfigError("method 'rkd' requires lambda = 0", "distill.lambda")
        if self.method in ("pkd", "ckd") and self.lam and self.mapping is None:
            raise ConfigError(f"method {self.method!r} needs a mapping", "distill.mapping")
        if self.method == "pkd" and self.mapping is not None and not self.mapping.is_singleton:
            raise ConfigError("method 'pkd' requires a singleton mapping", "distill.mapping")
        if self.attention_loss and (self.mapping is None or not self.mapping.is_singleton):
            raise ConfigError("attention_loss needs a singleton mapping", "distill.attention_loss")
        self.weights  # validates

    @property
    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.eta, self.lam)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"distill.{exc.field}") from None

    @property
    def uses_fusion(self) -> bool:
        return self.method == "ckd"
