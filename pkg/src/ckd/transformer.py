"""Post-norm encoder-decoder transformer that exposes every layer's output.

Hidden state ``i`` of a stack is the output of block ``i`` after its last
residual add and layer norm, i.e. exactly what block ``i + 1`` consumes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 19
    max_len: int = 16
    dropout: float = 0.1
    label_smoothing: float = 0.1

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", name)
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}", "n_heads")
        for name in ("dropout", "label_smoothing"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"must lie in [0, 1), got {value!r}", name)

    @classmethod
    def teacher(cls, **kw):
        return cls(**{"enc_layers": 6, "dec_layers": 6, **kw})

    @classmethod
    def student(cls, **kw):
        return cls(**{"enc_layers": 2, "dec_layers": 2, **kw})

    @classmethod
    def from_dict(cls, data, section="model"):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown fields {sorted(unknown)}", section)
        try:
            return cls(**data)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{section}.{exc.field}") from None

    def to_dict(self):
        return dataclasses.asdict(self)


def _attn_names(prefix):
    return [f"{prefix}.{p}.{k}" for p in ("q", "k", "v", "o") for k in ("weight", "bias")]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; the model layout in one place."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"src_embed": (v, d), "tgt_embed": (v, d)}

    def attn(prefix):
        for name in _attn_names(prefix):
            shapes[name] = (d, d) if name.endswith("weight") else (d,)

    def norm(prefix):
        shapes[f"{prefix}.gamma"] = (d,)
        shapes[f"{prefix}.beta"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.fc1.weight"] = (ff, d)
        shapes[f"{prefix}.fc1.bias"] = (ff,)
        shapes[f"{prefix}.fc2.weight"] = (d, ff)
        shapes[f"{prefix}.fc2.bias"] = (d,)

    for i in range(config.enc_layers):
        p = f"enc.{i}"
        attn(f"{p}.self_attn")
        norm(f"{p}.norm1")
        ffn(f"{p}.ffn")
        norm(f"{p}.norm2")
    for i in range(config.dec_layers):
        p = f"dec.{i}"
        attn(f"{p}.self_attn")
        norm(f"{p}.norm1")
        attn(f"{p}.cross_attn")
        norm(f"{p}.norm2")
        ffn(f"{p}.ffn")
        norm(f"{p}.norm3")
    shapes["out.weight"] = (v, d)
    shapes["out.bias"] = (v,)
    return shapes


def analytic_param_count(config: ModelConfig) -> int:
    """Closed-form count, independent of :func:`param_shapes`."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    attn = 4 * (d * d + d)
    ffn = d * ff + ff + ff * d + d
    norm = 2 * d
    enc = attn + ffn + 2 * norm
    dec = 2 * attn + ffn + 3 * norm
    return 2 * v * d + config.enc_layers * enc + config.dec_layers * dec + v * d + v


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def astype(self, dtype):
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return TransformerModel(self.config, params)


@dataclass
class ForwardTrace:
    logits: Tensor
    enc_hiddens: list[Tensor]
    dec_hiddens: list[Tensor]
    enc_self_attn: list[Tensor]
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    dec_self_attn: list[Tensor] = field(default_factory=list)


def count_params(model: TransformerModel) -> int:
    return int(sum(p.size for p in model.params.values()))


def _xavier(rng, shape):
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> TransformerModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("embed"):
            data = rng.normal(0.0, config.d_model ** -0.5, size=shape)
        elif name.endswith("weight"):
            data = _xavier(rng, shape)
        elif name.endswith("gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return TransformerModel(config, params)


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class _Runner:
    """Holds per-call state (mode, rng) while running the stacks."""

    def __init__(self, model, train, rng):
        self.p = model.params
        self.cfg = model.config
        self.train = train
        self.rng = rng
        self.dtype = model.params["src_embed"].dtype

    def drop(self, x):
        return T.dropout(x, self.cfg.dropout, self.rng, self.train)

    def embed(self, table, ids):
        length = ids.shape[1]
        x = T.embedding(self.p[table], ids) * float(np.sqrt(self.cfg.d_model))
        pe = positional_encoding(length, self.cfg.d_model).astype(self.dtype)
        return self.drop(x + pe)

    def linear(self, x, prefix):
        return T.linear(x, self.p[f"{prefix}.weight"], self.p[f"{prefix}.bias"])

    def norm(self, x, prefix):
        return T.layer_norm(x, self.p[f"{prefix}.gamma"], self.p[f"{prefix}.beta"])

    def heads(self, x):
        b, s, _ = x.shape
        h = self.cfg.n_heads
        return x.reshape(b, s, h, self.cfg.d_model // h).transpose(0, 2, 1, 3)

    def attention(self, x_q, x_kv, prefix, bias):
        """Multi-head attention; ``bias`` is an additive mask broadcastable to (B,H,Sq,Sk)."""
        b, sq, d = x_q.shape
        q = self.heads(self.linear(x_q, f"{prefix}.q"))
        k = self.heads(self.linear(x_kv, f"{prefix}.k"))
        v = self.heads(self.linear(x_kv, f"{prefix}.v"))
        scale = 1.0 / np.sqrt(d // self.cfg.n_heads)
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * scale + bias
        probs = T.softmax(scores)
        ctx = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, sq, d)
        return self.linear(ctx, f"{prefix}.o"), probs

    def ffn(self, x, prefix):
        return self.linear(T.relu(self.linear(x, f"{prefix}.fc1")), f"{prefix}.fc2")

    def encode(self, src_ids, src_mask):
        bias = (np.where(src_mask, _NEG, 0.0)[:, None, None, :]).astype(self.dtype)
        x = self.embed("src_embed", src_ids)
        hiddens, attns = [], []
        for i in range(self.cfg.enc_layers):
            p = f"enc.{i}"
            a, probs = self.attention(x, x, f"{p}.self_attn", bias)
            x = self.norm(x + self.drop(a), f"{p}.norm1")
            x = self.norm(x + self.drop(self.ffn(x, f"{p}.ffn")), f"{p}.norm2")
            hiddens.append(x)
            attns.append(probs)
        return hiddens, attns

    def decode(self, memory, src_mask, tgt_ids):
        t = tgt_ids.shape[1]
        causal = np.triu(np.full((t, t), _NEG), k=1).astype(self.dtype)
        cross_bias = (np.where(src_mask, _NEG, 0.0)[:, None, None, :]).astype(self.dtype)
        y = self.embed("tgt_embed", tgt_ids)
        hiddens, attns = [], []
        for i in range(self.cfg.dec_layers):
            p = f"dec.{i}"
            a, probs = self.attention(y, y, f"{p}.self_attn", causal)
            y = self.norm(y + self.drop(a), f"{p}.norm1")
            c, _ = self.attention(y, memory, f"{p}.cross_attn", cross_bias)
            y = self.norm(y + self.drop(c), f"{p}.norm2")
            y = self.norm(y + self.drop(self.ffn(y, f"{p}.ffn")), f"{p}.norm3")
            hiddens.append(y)
            attns.append(probs)
        return self.linear(y, "out"), hiddens, attns


def _check_ids(ids, config, what):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DataError(f"{what} ids must be 2-D (batch x length), got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DataError(f"{what} token id out of range [0, {config.vocab_size})")
    if ids.shape[1] > config.max_len:
        raise DataError(f"{what} length {ids.shape[1]} exceeds max_len={config.max_len}")
    return ids


def forward(model, src_ids, tgt_in_ids, src_mask=None, tgt_mask=None, mode="eval", rng=None) -> ForwardTrace:
    """Run encoder and decoder; masks are True at padded positions."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = model.config
    src_ids = _check_ids(src_ids, cfg, "source")
    tgt_in_ids = _check_ids(tgt_in_ids, cfg, "target")
    src_mask = src_ids == PAD if src_mask is None else np.asarray(src_mask, dtype=bool)
    tgt_mask = tgt_in_ids == PAD if tgt_mask is None else np.asarray(tgt_mask, dtype=bool)
    train = mode == "train"
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    run = _Runner(model, train, rng)
    enc_h, enc_a = run.encode(src_ids, src_mask)
    logits, dec_h, dec_a = run.decode(enc_h[-1], src_mask, tgt_in_ids)
    return ForwardTrace(logits, enc_h, dec_h, enc_a, src_mask, tgt_mask, dec_a)


def greedy_decode(model, src_ids, src_mask=None, max_len=None, bos=BOS, eos=EOS) -> list[list[int]]:
    """Argmax decoding; returns token lists without bos/eos."""
    cfg = model.config
    src_ids = _check_ids(src_ids, cfg, "source")
    src_mask = src_ids == PAD if src_mask is None else np.asarray(src_mask, dtype=bool)
    limit = cfg.max_len - 1 if max_len is None else min(max_len, cfg.max_len - 1)
    batch = src_ids.shape[0]
    with T.no_grad():
        run = _Runner(model, False, None)
        memory = run.encode(src_ids, src_mask)[0][-1]
        seq = np.full((batch, 1), bos, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        for _ in range(limit):
            logits, _, _ = run.decode(memory, src_mask, seq)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            done |= nxt == eos
            if done.all():
                break
    out = []
    for row in seq[:, 1:]:
        tokens = []
        for tok in row:
            if tok == eos or tok == PAD:
                break
            tokens.append(int(tok))
        out.append(tokens)
    return out
