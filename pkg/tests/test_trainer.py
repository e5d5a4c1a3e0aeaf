import json
import math

import numpy as np
import pytest

from ckd.checkpoint import load_checkpoint, params_digest, save_checkpoint
from ckd.distill import DistillConfig, FusionParams
from ckd.errors import CheckpointError, ConfigError, TrainingError
from ckd.mapper import generate_mapping
from ckd.tasks import TaskSpec, generate_corpus
from ckd.trainer import (
    Adam,
    TeacherCache,
    TrainConfig,
    clip_grad_norm,
    distill_student,
    evaluate,
    learning_rate,
    train_teacher,
)
from ckd.tensor import Tensor
from ckd.transformer import ModelConfig, count_params, init_model

TASK = TaskSpec(kind="reverse", vocab_size=6, min_len=2, max_len=5, n_train=160, n_dev=40, n_test=40, seed=1)
TEACHER = ModelConfig(enc_layers=4, dec_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=9, max_len=8)
STUDENT = ModelConfig(enc_layers=2, dec_layers=1, d_model=16, n_heads=2, d_ff=32, vocab_size=9, max_len=8)
FAST = TrainConfig(epochs=1, batch_size=32, warmup=10, eval_every=5)
DEFAULT_WEIGHTS = dict(eta=0.1, lam=0.7)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(TASK)


@pytest.fixture(scope="module")
def teacher(tmp_path_factory, corpus):
    path = tmp_path_factory.mktemp("teacher") / "ckpt"
    train_teacher(TEACHER, TASK, FAST, path, corpus=corpus)
    return path


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


# schedule and optimizer

def test_learning_rate_warmup_then_decay():
    rates = [learning_rate(s, 64, 400) for s in range(1, 2000)]
    assert all(r > 0 for r in rates)
    peak = int(np.argmax(rates)) + 1
    assert peak == 400
    assert rates[399] == pytest.approx(64 ** -0.5 * 400 ** -0.5)
    assert learning_rate(1600, 64, 400) == pytest.approx(rates[399] / 2)
    assert learning_rate(10, 64, 400, scale=2.0) == pytest.approx(2 * learning_rate(10, 64, 400))


def test_train_config_validation():
    with pytest.raises(ConfigError, match="warmup"):
        TrainConfig(warmup=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
    cfg = TrainConfig().with_seed(9)
    assert (cfg.model_seed, cfg.data_seed, cfg.dropout_seed) == (9, 9, 9)


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x])
    for _ in range(500):
        opt.zero_grad()
        x.grad = 2 * x.data
        opt.step(0.05)
    assert np.abs(x.data).max() < 1e-2


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    total = math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum()))
    assert total == pytest.approx(1.0, abs=1e-5)


# checkpoints

def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = init_model(STUDENT, seed=2)
    fusion = FusionParams.init(generate_mapping("RC", 4, 2), 16)
    first = save_checkpoint(tmp_path / "a", model, fusion, {"role": "student"})
    ck = load_checkpoint(first)
    second = save_checkpoint(tmp_path / "b", ck.model, ck.fusion, ck.manifest)
    assert (first / "params.bin").read_bytes() == (second / "params.bin").read_bytes()
    assert params_digest(ck.model) == params_digest(model)
    assert [w.shape for w in ck.fusion.weights] == [(16, 32), (16, 32)]


def test_manifest_lists_every_parameter(tmp_path):
    model = init_model(STUDENT)
    doc = json.loads((save_checkpoint(tmp_path, model) / "manifest.json").read_text())
    assert doc["format_version"] == 1
    assert sum(int(np.prod(p["shape"])) for p in doc["params"]) == count_params(model)
    assert [p["name"] for p in doc["params"]] == list(model.params)


def test_truncated_blob_names_parameter(tmp_path):
    path = save_checkpoint(tmp_path, init_model(STUDENT))
    blob = path / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="out.bias"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = save_checkpoint(tmp_path, init_model(STUDENT))
    with open(path / "params.bin", "ab") as fh:
        fh.write(b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_manifest_shape_tamper_names_parameter(tmp_path):
    path = save_checkpoint(tmp_path, init_model(STUDENT))
    doc = json.loads((path / "manifest.json").read_text())
    doc["params"][2]["shape"] = [1]
    (path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match=doc["params"][2]["name"]):
        load_checkpoint(path)


def test_version_and_missing_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
    path = save_checkpoint(tmp_path / "v", init_model(STUDENT))
    doc = json.loads((path / "manifest.json").read_text())
    doc["format_version"] = 2
    (path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


# training

def test_zero_epochs_returns_initialization(tmp_path, corpus):
    cfg = TrainConfig(epochs=0, batch_size=32, warmup=10)
    result = train_teacher(STUDENT, TASK, cfg, tmp_path / "z", corpus=corpus)
    assert params_digest(load_checkpoint(result.checkpoint).model) == params_digest(init_model(STUDENT, 0))
    assert len(result.evals) == 1


def test_same_seeds_are_bit_identical(tmp_path, corpus):
    a = train_teacher(STUDENT, TASK, FAST, tmp_path / "a", corpus=corpus)
    b = train_teacher(STUDENT, TASK, FAST, tmp_path / "b", corpus=corpus)
    assert (a.checkpoint / "params.bin").read_bytes() == (b.checkpoint / "params.bin").read_bytes()
    assert [h["total"] for h in a.history] == [h["total"] for h in b.history]


def test_logs_and_best_selection(tmp_path, corpus):
    result = train_teacher(STUDENT, TASK, FAST, tmp_path / "t", corpus=corpus)
    steps = read_jsonl(result.checkpoint / "steps.jsonl")
    metrics = read_jsonl(result.checkpoint / "metrics.jsonl")
    assert len(steps) == 5
    assert set(metrics[0]) == {"step", "hard", "soft", "layer", "attn", "total", "dev_acc", "dev_bleu"}
    best = max(m["dev_acc"] for m in metrics)
    assert result.best_metrics["dev_acc"] == best
    manifest = load_checkpoint(result.checkpoint).manifest
    assert manifest["metrics"]["dev_acc"] == best


def test_evaluate_is_deterministic_and_untrained_near_chance(corpus):
    model = init_model(STUDENT, seed=4)
    a, b = evaluate(model, corpus.dev), evaluate(model, corpus.dev)
    assert a == b
    assert a["token_accuracy"] < 2 / TASK.vocab_size


def test_divergence_raises_training_error(corpus):
    cfg = TrainConfig(epochs=1, batch_size=32, warmup=1, lr_scale=1e6, clip_norm=0.0)
    with pytest.raises(TrainingError) as info:
        train_teacher(STUDENT, TASK, cfg, corpus=corpus)
    assert info.value.step >= 1


# distillation

def test_no_kd_weights_match_plain_training(tmp_path, teacher, corpus):
    plain = train_teacher(STUDENT, TASK, FAST, corpus=corpus)
    none = distill_student(STUDENT, teacher, DistillConfig("none", 0.0, 0.0), TASK, FAST, corpus=corpus)
    assert [h["hard"] for h in none.history] == [h["hard"] for h in plain.history]
    assert params_digest(none.model) == params_digest(plain.model)


def test_zero_lambda_logs_zero_layer(teacher, corpus):
    result = distill_student(STUDENT, teacher, DistillConfig("rkd", 0.5, 0.0), TASK, FAST, corpus=corpus)
    assert all(h["layer"] == 0.0 for h in result.history)
    assert all(h["soft"] > 0 for h in result.history)


@pytest.mark.parametrize("method,variant,attn", [("ckd", "RC", False), ("ckd", "OC", False), ("pkd", "PKD", True)])
def test_teacher_frozen_and_total_decomposes(tmp_path, teacher, corpus, method, variant, attn):
    before = params_digest(load_checkpoint(teacher).model)
    cfg = DistillConfig(method, mapping=generate_mapping(variant, 4, 2), attention_loss=attn, **DEFAULT_WEIGHTS)
    result = distill_student(STUDENT, teacher, cfg, TASK, FAST, tmp_path / "s", corpus=corpus)
    assert params_digest(load_checkpoint(teacher).model) == before
    for row in read_jsonl(result.checkpoint / "steps.jsonl"):
        assert row["beta"] == pytest.approx(0.2, abs=1e-12)
        recon = row["beta"] * row["hard"] + row["eta"] * row["soft"] + row["lam"] * (row["layer"] + (row["attn"] or 0))
        assert abs(row["total"] - recon) < 1e-6
        assert row["layer"] > 0
        assert (row["attn"] is not None) == attn
    ck = load_checkpoint(result.checkpoint)
    assert ck.manifest["distill"]["mapping"] == generate_mapping(variant, 4, 2).to_json()
    assert (ck.fusion is not None) == (method == "ckd")


def test_cache_matches_live_teacher(teacher, corpus):
    cfg = DistillConfig("ckd", mapping=generate_mapping("RC", 4, 2), **DEFAULT_WEIGHTS)
    short = TrainConfig(epochs=1, batch_size=32, warmup=10, max_steps=3)
    cached = distill_student(STUDENT, teacher, cfg, TASK, short, corpus=corpus, teacher_cache=True)
    live = distill_student(STUDENT, teacher, cfg, TASK, short, corpus=corpus, teacher_cache=False)
    for a, b in zip(cached.history, live.history):
        for key in ("hard", "soft", "layer", "total"):
            assert a[key] == pytest.approx(b[key], rel=1e-4)


def test_cache_lookup_repads(teacher, corpus):
    model = load_checkpoint(teacher).model
    pairs = corpus.train[:5]
    cache = TeacherCache(model, pairs, layers=(1, 2))
    assert cache.covers(pairs) and not cache.covers(corpus.dev[:1])
    hidden, _, logits = cache.lookup(pairs, 7, 8)
    assert hidden[1].shape == (5, 7, 16) and logits.shape == (5, 8, TEACHER.vocab_size)
    n = len(pairs[0][0])
    assert np.all(hidden[1][0, n:] == 0)


def test_incompatible_student_rejected(teacher):
    deep = ModelConfig(enc_layers=5, dec_layers=1, d_model=16, n_heads=2, d_ff=32, vocab_size=9, max_len=8)
    with pytest.raises(ConfigError, match="enc_layers"):
        distill_student(deep, teacher, DistillConfig("rkd", 0.5, 0.0), TASK, FAST)
    wide = ModelConfig(enc_layers=2, dec_layers=1, d_model=32, n_heads=2, d_ff=32, vocab_size=9, max_len=8)
    with pytest.raises(ConfigError, match="d_model"):
        distill_student(wide, teacher, DistillConfig("rkd", 0.5, 0.0), TASK, FAST)
    with pytest.raises(ConfigError, match="mapping"):
        cfg = DistillConfig("ckd", mapping=generate_mapping("RC", 6, 2), **DEFAULT_WEIGHTS)
        distill_student(STUDENT, teacher, cfg, TASK, FAST)
