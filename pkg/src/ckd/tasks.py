"""Synthetic transduction corpora, batching, and evaluation metrics."""
from __future__ import annotations

import dataclasses
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .transformer import BOS, EOS, PAD

FIRST_CONTENT = 3
TASKS = {
    "copy": lambda seq: list(seq),
    "reverse": lambda seq: list(reversed(seq)),
    "sort": lambda seq: sorted(seq),
}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "reverse"
    vocab_size: int = 16
    min_len: int = 4
    max_len: int = 12
    n_train: int = 20000
    n_dev: int = 1000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ConfigError(f"unknown task {self.kind!r}; expected one of {sorted(TASKS)}", "task.kind")
        if self.vocab_size < 1:
            raise ConfigError("must be positive", "task.vocab_size")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}", "task.min_len")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", f"task.{name}")

    @property
    def model_vocab(self) -> int:
        """Vocabulary size the model needs: content tokens plus pad/bos/eos."""
        return self.vocab_size + FIRST_CONTENT

    def check_model(self, max_len: int):
        if self.max_len > max_len - 2:
            raise ConfigError(
                f"task max_len {self.max_len} leaves no room for bos/eos in model max_len {max_len}", "task.max_len"
            )

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown fields {sorted(unknown)}", "task")
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)


Pair = tuple[list[int], list[int]]


@dataclass
class Corpus:
    train: list[Pair]
    dev: list[Pair]
    test: list[Pair]
    kind: str = "reverse"

    def split(self, name: str) -> list[Pair]:
        if name not in ("train", "dev", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def generate_corpus(spec: TaskSpec) -> Corpus:
    """Disjoint train/dev/test sets of (source, task(source)) pairs."""
    capacity = sum(spec.vocab_size ** n for n in range(spec.min_len, spec.max_len + 1))
    wanted = spec.n_train + spec.n_dev + spec.n_test
    if wanted > capacity // 2:
        raise ConfigError(
            f"{wanted} distinct sentences requested but only {capacity} exist "
            f"(need at most half for sampling without exhaustive search)",
            "task.vocab_size",
        )
    rng = np.random.default_rng(spec.seed)
    fn = TASKS[spec.kind]
    seen = set()
    splits = []
    for n in (spec.n_train, spec.n_dev, spec.n_test):
        pairs = []
        while len(pairs) < n:
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = tuple(int(t) for t in rng.integers(FIRST_CONTENT, spec.vocab_size + FIRST_CONTENT, size=length))
            if src in seen:
                continue
            seen.add(src)
            pairs.append((list(src), fn(list(src))))
        splits.append(pairs)
    return Corpus(*splits, kind=spec.kind)


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self):
        return self.src.shape[0]

    @property
    def n_tokens(self) -> int:
        return int((~self.tgt_mask).sum())


def collate(pairs) -> Batch:
    """Pad a list of pairs; decoder input is ``bos + tgt``, output ``tgt + eos``."""
    b = len(pairs)
    s_len = max(len(s) for s, _ in pairs)
    t_len = max(len(t) for _, t in pairs) + 1
    src = np.full((b, s_len), PAD, dtype=np.int64)
    tgt_in = np.full((b, t_len), PAD, dtype=np.int64)
    tgt_out = np.full((b, t_len), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tgt_in[i, : len(t) + 1] = [BOS] + list(t)
        tgt_out[i, : len(t) + 1] = list(t) + [EOS]
    return Batch(src, tgt_in, tgt_out, src == PAD, tgt_out == PAD)


def make_batches(pairs, batch_size: int, seed: int | None) -> list[Batch]:
    """Shuffle (unless ``seed`` is None) and cut into padded batches."""
    if batch_size < 1:
        raise ConfigError("must be >= 1", "batch_size")
    pairs = list(pairs.train if isinstance(pairs, Corpus) else pairs)
    order = np.arange(len(pairs)) if seed is None else np.random.default_rng(seed).permutation(len(pairs))
    return [collate([pairs[j] for j in order[i:i + batch_size]]) for i in range(0, len(pairs), batch_size)]


def token_accuracy(hyps, refs) -> float:
    """Position-wise matches over ``sum(max(len(h), len(r)))``.

    Missing or surplus tokens count as errors.
    """
    hyps, refs = list(hyps), list(refs)
    if not refs:
        raise DataError("empty reference set")
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    matched = total = 0
    for h, r in zip(hyps, refs):
        matched += sum(1 for a, b in zip(h, r) if a == b)
        total += max(len(h), len(r))
    return matched / total if total else 1.0


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps, refs, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with add-one smoothing on n >= 2 precisions."""
    hyps, refs = list(hyps), list(refs)
    if not hyps:
        raise DataError("empty hypothesis corpus")
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * max_n
    counts = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            counts[n - 1] += sum(hc.values())
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / counts[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (counts[n] + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def dump_pairs(pairs, path):
    """One pair per line: space-separated source ids, tab, target ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in pairs:
            fh.write(" ".join(map(str, s)) + "\t" + " ".join(map(str, t)) + "\n")


def load_pairs(path) -> list[Pair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            src, tgt = line.split("\t")
            pairs.append(([int(x) for x in src.split()], [int(x) for x in tgt.split()]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed pair line") from None
    return pairs
