"""Teacher training, student distillation, and evaluation loops."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .distill import (
    DistillConfig,
    FusionParams,
    LossWeights,
    attention_loss,
    hard_loss,
    layer_loss,
    soft_loss,
    total_loss,
)
from .errors import ConfigError, TrainingError
from .mapper import validate_mapping
from .tasks import Corpus, TaskSpec, collate, corpus_bleu, generate_corpus, token_accuracy
from .transformer import ModelConfig, TransformerModel, forward, greedy_decode, init_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    warmup: int = 400
    lr_scale: float = 1.0
    adam_betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    model_seed: int = 0
    data_seed: int = 0
    dropout_seed: int = 0
    eval_every: int = 500
    max_steps: int | None = None
    eval_batch_size: int = 250
    # a loss this many times the first-step loss counts as divergence
    divergence_ratio: float = 100.0

    def __post_init__(self):
        if self.warmup < 1:
            raise ConfigError("must be >= 1", "train.warmup")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "train.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if not self.lr_scale > 0:
            raise ConfigError("must be > 0", "train.lr_scale")
        if not self.divergence_ratio > 1:
            raise ConfigError("must be > 1", "train.divergence_ratio")
        if self.eval_every < 1:
            raise ConfigError("must be >= 1", "train.eval_every")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    @classmethod
    def from_dict(cls, data, section="train"):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown fields {sorted(unknown)}", section)
        return cls(**data)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    def with_seed(self, seed: int):
        return dataclasses.replace(self, model_seed=seed, data_seed=seed, dropout_seed=seed)


def learning_rate(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """Inverse-square-root schedule with linear warmup; ``step`` starts at 1."""
    step = max(step, 1)
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    def __init__(self, params, betas=(0.9, 0.98), eps=1e-9):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _resolve_model(source) -> TransformerModel:
    if isinstance(source, TransformerModel):
        return source
    if isinstance(source, Checkpoint):
        return source.model
    return load_checkpoint(source).model


def evaluate(source, pairs, batch_size: int = 250) -> dict:
    """Greedy-decode ``pairs`` and score them. ``source`` is a model, Checkpoint or path."""
    model = _resolve_model(source)
    pairs = list(pairs)
    hyps, refs = [], []
    nll, tokens = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        batch = collate(chunk)
        hyps.extend(greedy_decode(model, batch.src, batch.src_mask, max_len=batch.tgt_in.shape[1] + 1))
        refs.extend(t for _, t in chunk)
        with T.no_grad():
            trace = forward(model, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask, "eval")
            nll += hard_loss(trace.logits, batch.tgt_out, batch.tgt_mask, 0.0).item() * batch.n_tokens
        tokens += batch.n_tokens
    return {
        "token_accuracy": token_accuracy(hyps, refs),
        "bleu": corpus_bleu(hyps, refs),
        "loss": nll / max(tokens, 1),
    }


class TeacherCache:
    """Per-sentence teacher outputs for a fixed pair list (teacher in eval mode).

    Padded positions never influence unpadded ones, so states computed once
    per sentence can be re-padded into any batch.
    """

    def __init__(self, teacher: TransformerModel, pairs, layers=(), attn_layers=(), logits=True, batch_size=256):
        self.layers = tuple(layers)
        self.attn_layers = tuple(attn_layers)
        self.keep_logits = logits
        self.index = {}
        self.hidden, self.attn, self.logits = [], [], []
        pairs = list(pairs)
        with T.no_grad():
            for start in range(0, len(pairs), batch_size):
                chunk = pairs[start:start + batch_size]
                batch = collate(chunk)
                tr = forward(teacher, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask, "eval")
                for r, (s, t) in enumerate(chunk):
                    ls, lt = len(s), len(t) + 1
                    self.index[tuple(s)] = len(self.hidden)
                    self.hidden.append({j: tr.enc_hiddens[j - 1].data[r, :ls].copy() for j in self.layers})
                    self.attn.append({j: tr.enc_self_attn[j - 1].data[r, :, :ls, :ls].copy() for j in self.attn_layers})
                    self.logits.append(tr.logits.data[r, :lt].copy() if logits else None)

    def covers(self, batch_pairs) -> bool:
        return all(tuple(s) in self.index for s, _ in batch_pairs)

    def lookup(self, batch_pairs, src_len, tgt_len):
        rows = [self.index[tuple(s)] for s, _ in batch_pairs]
        b = len(rows)
        hidden = {}
        for j in self.layers:
            d = self.hidden[rows[0]][j].shape[-1]
            arr = np.zeros((b, src_len, d), dtype=np.float32)
            for r, k in enumerate(rows):
                h = self.hidden[k][j]
                arr[r, : h.shape[0]] = h
            hidden[j] = arr
        attn = {}
        for j in self.attn_layers:
            heads = self.attn[rows[0]][j].shape[0]
            arr = np.zeros((b, heads, src_len, src_len), dtype=np.float32)
            for r, k in enumerate(rows):
                a = self.attn[k][j]
                n = a.shape[-1]
                arr[r, :, :n, :n] = a
            attn[j] = arr
        logits = None
        if self.keep_logits:
            v = self.logits[rows[0]].shape[-1]
            logits = np.zeros((b, tgt_len, v), dtype=np.float32)
            for r, k in enumerate(rows):
                lg = self.logits[k]
                logits[r, : lg.shape[0]] = lg
        return hidden, attn, logits


@dataclass
class TrainResult:
    model: TransformerModel
    checkpoint: Path | None
    best_metrics: dict
    history: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    fusion: FusionParams | None = None


def _snapshot(tensors):
    return [t.data.copy() for t in tensors]


def _restore(tensors, snap):
    for t, arr in zip(tensors, snap):
        t.data = arr.copy()


def _train_loop(model, corpus, cfg: TrainConfig, loss_fn, extra_params, out_path, manifest, fusion=None,
                dec_fusion=None, log_dir=None):
    params = model.parameters() + list(extra_params)
    opt = Adam(params, cfg.adam_betas, cfg.adam_eps)
    drop_rng = np.random.default_rng(cfg.dropout_seed)
    history, evals = [], []
    best_acc, best_step = -1.0, 0
    best_metrics = {}
    best_snap = _snapshot(params)
    log_dir = Path(log_dir) if log_dir is not None else (Path(out_path) if out_path is not None else None)
    step_log = metrics_log = None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        step_log = open(log_dir / "steps.jsonl", "w", encoding="utf-8")
        metrics_log = open(log_dir / "metrics.jsonl", "w", encoding="utf-8")

    def run_eval(step):
        nonlocal best_acc, best_step, best_metrics, best_snap
        dev = evaluate(model, corpus.dev, cfg.eval_batch_size)
        recent = history[-cfg.eval_every:] if history else []

        def avg(key):
            vals = [h[key] for h in recent if h[key] is not None]
            return float(np.mean(vals)) if vals else (None if key == "attn" else 0.0)

        row = {
            "step": step, "hard": avg("hard"), "soft": avg("soft"), "layer": avg("layer"), "attn": avg("attn"),
            "total": avg("total"), "dev_acc": dev["token_accuracy"], "dev_bleu": dev["bleu"],
        }
        evals.append(row)
        if metrics_log:
            metrics_log.write(json.dumps(row) + "\n")
            metrics_log.flush()
        log.info("step %d dev_acc %.4f dev_bleu %.2f", step, dev["token_accuracy"], dev["bleu"])
        if dev["token_accuracy"] > best_acc:
            best_acc, best_step = dev["token_accuracy"], step
            best_metrics = {"step": step, "dev_acc": dev["token_accuracy"], "dev_bleu": dev["bleu"], "dev_loss": dev["loss"]}
            best_snap = _snapshot(params)

    step = 0
    last_eval = None
    first_total = None
    try:
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            for batch_pairs, batch in _epoch_batches(corpus.train, cfg.batch_size, [cfg.data_seed, epoch]):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                step += 1
                opt.zero_grad()
                graph, report = loss_fn(batch_pairs, batch, drop_rng)
                if first_total is None:
                    first_total = report.total
                if not math.isfinite(report.total) or report.total > cfg.divergence_ratio * max(first_total, 1e-3):
                    T.get_tape().reset()
                    raise TrainingError(f"loss diverged ({report.total:.6g}, first step {first_total:.6g})", step)
                T.backward(graph)
                clip_grad_norm(params, cfg.clip_norm)
                lr = learning_rate(step, model.config.d_model, cfg.warmup, cfg.lr_scale)
                opt.step(lr)
                row = {"step": step, "lr": lr, **report.as_dict(), "beta": report.beta, "eta": report.eta, "lam": report.lam}
                history.append(row)
                if step_log:
                    step_log.write(json.dumps(row) + "\n")
                if step % cfg.eval_every == 0:
                    run_eval(step)
                    last_eval = step
        if last_eval != step:
            run_eval(step)
    finally:
        if step_log:
            step_log.close()
            metrics_log.close()

    _restore(params, best_snap)
    ckpt_path = None
    if out_path is not None:
        doc = dict(manifest)
        doc["step"] = best_step
        doc["metrics"] = best_metrics
        ckpt_path = save_checkpoint(out_path, model, fusion, doc, dec_fusion)
    return TrainResult(model, ckpt_path, best_metrics, history, evals, fusion)


def _epoch_batches(pairs, batch_size, seed):
    order = np.random.default_rng(seed).permutation(len(pairs))
    for i in range(0, len(pairs), batch_size):
        chunk = [pairs[j] for j in order[i:i + batch_size]]
        yield chunk, collate(chunk)


def _corpus(task_spec, corpus):
    return corpus if corpus is not None else generate_corpus(task_spec)


def _check_model_task(config: ModelConfig, spec: TaskSpec, section):
    if config.vocab_size < spec.model_vocab:
        raise ConfigError(f"vocab_size {config.vocab_size} < task needs {spec.model_vocab}", f"{section}.vocab_size")
    spec.check_model(config.max_len)


def train_teacher(model_config: ModelConfig, task_spec: TaskSpec, train_config: TrainConfig, out_path=None,
                  corpus: Corpus | None = None, log_dir=None) -> TrainResult:
    """Train with the hard loss only; keeps the best-dev parameters."""
    _check_model_task(model_config, task_spec, "teacher")
    corpus = _corpus(task_spec, corpus)
    model = init_model(model_config, train_config.model_seed)
    weights = LossWeights(0.0, 0.0)
    smoothing = model_config.label_smoothing

    def loss_fn(pairs, batch, rng):
        trace = forward(model, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask, "train", rng)
        hard = hard_loss(trace.logits, batch.tgt_out, batch.tgt_mask, smoothing)
        return total_loss(hard, None, None, None, weights)

    manifest = {"role": "model", "task": task_spec.to_dict(), "train": train_config.to_dict()}
    return _train_loop(model, corpus, train_config, loss_fn, [], out_path, manifest, log_dir=log_dir)


def check_compatibility(student_config: ModelConfig, teacher_config: ModelConfig, distill: DistillConfig):
    """Raise ConfigError for any teacher/student/mapping mismatch."""
    if student_config.d_model != teacher_config.d_model:
        raise ConfigError(
            f"student d_model {student_config.d_model} != teacher d_model {teacher_config.d_model}", "student.d_model"
        )
    if student_config.vocab_size != teacher_config.vocab_size:
        raise ConfigError("student and teacher vocabularies differ", "student.vocab_size")
    if student_config.enc_layers > teacher_config.enc_layers:
        raise ConfigError(
            f"student encoder ({student_config.enc_layers}) deeper than teacher ({teacher_config.enc_layers})",
            "student.enc_layers",
        )
    if distill.attention_loss and student_config.n_heads != teacher_config.n_heads:
        raise ConfigError("attention matching needs equal head counts", "student.n_heads")
    for mapping, n_t, n_s, where in (
        (distill.mapping, teacher_config.enc_layers, student_config.enc_layers, "distill.mapping"),
        (distill.decoder_mapping, teacher_config.dec_layers, student_config.dec_layers, "distill.decoder_mapping"),
    ):
        if mapping is None:
            continue
        report = validate_mapping(mapping, n_t, n_s)
        if not report.ok or mapping.n_teacher != n_t:
            problems = report.violations or [f"mapping built for {mapping.n_teacher} teacher layers, teacher has {n_t}"]
            raise ConfigError("; ".join(problems), where)


def distill_student(student_config: ModelConfig, teacher_ckpt, distill_config: DistillConfig, task_spec: TaskSpec,
                    train_config: TrainConfig, out_path=None, corpus: Corpus | None = None,
                    teacher_cache: TeacherCache | bool = True, log_dir=None) -> TrainResult:
    """Train a student against a frozen teacher with the configured objective."""
    teacher = _resolve_model(teacher_ckpt)
    check_compatibility(student_config, teacher.config, distill_config)
    _check_model_task(student_config, task_spec, "student")
    corpus = _corpus(task_spec, corpus)
    student = init_model(student_config, train_config.model_seed)
    teacher_flags = [p.requires_grad for p in teacher.parameters()]
    teacher.requires_grad_(False)

    dc = distill_config
    weights = dc.weights
    d = student_config.d_model
    use_soft = weights.eta > 0
    use_layer = weights.lam > 0 and dc.mapping is not None
    use_attn = use_layer and dc.attention_loss
    use_dec = weights.lam > 0 and dc.decoder_mapping is not None
    fusion = FusionParams.init(dc.mapping, d) if use_layer and dc.uses_fusion else None
    dec_fusion = FusionParams.init(dc.decoder_mapping, d, prefix="dec_fusion") if use_dec and dc.uses_fusion else None
    extra = (fusion.parameters() if fusion else []) + (dec_fusion.parameters() if dec_fusion else [])
    smoothing = student_config.label_smoothing
    needs_teacher = use_soft or use_layer or use_dec

    cache = None
    if needs_teacher and not use_dec:
        layers = sorted(dc.mapping.used()) if use_layer else []
        attn_layers = sorted(dc.mapping.used()) if use_attn else []
        if isinstance(teacher_cache, TeacherCache):
            cache = teacher_cache
            missing = set(layers) - set(cache.layers) or set(attn_layers) - set(cache.attn_layers)
            if missing or (use_soft and not cache.keep_logits):
                raise ConfigError("supplied teacher cache lacks required layers", "teacher_cache")
        elif teacher_cache:
            cache = TeacherCache(teacher, corpus.train, layers, attn_layers, use_soft)

    def teacher_outputs(pairs, batch):
        if cache is not None and cache.covers(pairs):
            hidden, attn, logits = cache.lookup(pairs, batch.src.shape[1], batch.tgt_in.shape[1])
            enc_h = [hidden.get(j) for j in range(1, teacher.config.enc_layers + 1)]
            enc_a = [attn.get(j) for j in range(1, teacher.config.enc_layers + 1)]
            return enc_h, enc_a, logits, None
        with T.no_grad():
            tr = forward(teacher, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask, "eval")
        return ([h.data for h in tr.enc_hiddens], [a.data for a in tr.enc_self_attn], tr.logits.data,
                [h.data for h in tr.dec_hiddens])

    def loss_fn(pairs, batch, rng):
        trace = forward(student, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask, "train", rng)
        hard = hard_loss(trace.logits, batch.tgt_out, batch.tgt_mask, smoothing)
        soft = layer = attn = None
        if needs_teacher:
            enc_h, enc_a, t_logits, dec_h = teacher_outputs(pairs, batch)
            if use_soft:
                soft = soft_loss(trace.logits, t_logits, batch.tgt_mask)
            if use_layer:
                layer = layer_loss(trace.enc_hiddens, enc_h, dc.mapping, fusion, batch.src_mask)
            if use_dec:
                dec_term = layer_loss(trace.dec_hiddens, dec_h, dc.decoder_mapping, dec_fusion, batch.tgt_mask)
                layer = dec_term if layer is None else layer + dec_term
            if use_attn:
                attn = attention_loss(trace.enc_self_attn, enc_a, dc.mapping, batch.src_mask)
        return total_loss(hard, soft, layer, attn, weights)

    manifest = {
        "role": "student",
        "task": task_spec.to_dict(),
        "train": train_config.to_dict(),
        "distill": {
            "method": dc.method, "eta": dc.eta, "lambda": dc.lam, "beta": weights.beta,
            "mapping": dc.mapping.to_json() if dc.mapping is not None else None,
            "mapping_variant": dc.mapping.variant if dc.mapping is not None else None,
            "attention_loss": dc.attention_loss,
            "decoder_mapping": dc.decoder_mapping.to_json() if dc.decoder_mapping is not None else None,
        },
    }
    try:
        return _train_loop(student, corpus, train_config, loss_fn, extra, out_path, manifest, fusion, dec_fusion,
                           log_dir=log_dir)
    finally:
        for p, flag in zip(teacher.parameters(), teacher_flags):
            p.requires_grad = flag
