"""Experiment configs (one JSON file) and the comparison run behind ``ckd repro``."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .distill import DistillConfig
from .errors import ConfigError
from .mapper import generate_mapping, mapping_from_explicit
from .tasks import TaskSpec, generate_corpus
from .trainer import TrainConfig, distill_student, evaluate, train_teacher
from .transformer import ModelConfig, analytic_param_count

log = logging.getLogger(__name__)

SEED_ENV = "CKD_SEED"
SECTIONS = ("teacher", "student", "task", "train", "teacher_train", "distill", "paths")
DISTILL_KEYS = ("method", "eta", "lambda", "mapping", "attention_loss", "decoder_mapping")

# repro rows: label -> (method, mapping variant, eta, lambda)
REPRO_METHODS = {
    "none": ("none", None, 0.0, 0.0),
    "rkd": ("rkd", None, 0.1, 0.0),
    "pkd": ("pkd", "PKD", 0.1, 0.7),
    "rc": ("ckd", "RC", 0.1, 0.7),
    "oc": ("ckd", "OC", 0.1, 0.7),
    "sc": ("ckd", "SC", 0.1, 0.7),
    "cc": ("ckd", "CC", 0.1, 0.7),
}
REPRO_LABELS = {"none": "No-KD", "rkd": "RKD", "pkd": "PKD", "rc": "CKD-RC", "oc": "CKD-OC", "sc": "CKD-SC",
                "cc": "CKD-CC"}

# full-scale geometry used only for the parameter-ratio column
FULL_SCALE_GEOMETRY = dict(d_model=512, n_heads=8, d_ff=2048, vocab_size=32000, max_len=256)


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    teacher: ModelConfig = field(default_factory=ModelConfig.teacher)
    student: ModelConfig = field(default_factory=ModelConfig.student)
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher_train: TrainConfig | None = None
    distill: dict = field(default_factory=lambda: {"method": "none", "eta": 0.0, "lambda": 0.0})
    paths: dict = field(default_factory=dict)

    @property
    def teacher_train_config(self) -> TrainConfig:
        return self.teacher_train or self.train

    def distill_config(self, teacher_layers=None, student_layers=None, teacher_dec=None, student_dec=None):
        n_t = self.teacher.enc_layers if teacher_layers is None else teacher_layers
        n_s = self.student.enc_layers if student_layers is None else student_layers
        d_t = self.teacher.dec_layers if teacher_dec is None else teacher_dec
        d_s = self.student.dec_layers if student_dec is None else student_dec
        return parse_distill(self.distill, n_t, n_s, d_t, d_s)

    def with_seed(self, seed: int):
        tt = self.teacher_train.with_seed(seed) if self.teacher_train else None
        return dataclasses.replace(self, train=self.train.with_seed(seed), teacher_train=tt)


def _parse_mapping(section, n_t, n_s, where):
    if section is None:
        return None
    if isinstance(section, str):
        section = {"variant": section}
    if not isinstance(section, dict):
        raise ConfigError("expected an object with 'variant' or 'explicit'", where)
    if "explicit" in section:
        try:
            return mapping_from_explicit(section["explicit"], n_t, n_s)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{where}.explicit") from None
    if "variant" in section:
        try:
            return generate_mapping(section["variant"], n_t, n_s)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{where}.variant") from None
    raise ConfigError("needs 'variant' or 'explicit'", where)


def parse_distill(section: dict, n_t: int, n_s: int, n_t_dec: int = 0, n_s_dec: int = 0) -> DistillConfig:
    unknown = set(section) - set(DISTILL_KEYS)
    if unknown:
        raise ConfigError(f"unknown fields {sorted(unknown)}", "distill")
    method = section.get("method", "none")
    mapping = _parse_mapping(section.get("mapping"), n_t, n_s, "distill.mapping")
    dec = _parse_mapping(section.get("decoder_mapping"), n_t_dec, n_s_dec, "distill.decoder_mapping")
    try:
        eta = float(section.get("eta", 0.0))
        lam = float(section.get("lambda", 0.0))
    except (TypeError, ValueError):
        raise ConfigError("eta and lambda must be numbers", "distill") from None
    return DistillConfig(method, eta, lam, mapping, bool(section.get("attention_loss", False)), dec)


def _section(doc, name, cls, required=False):
    value = doc.get(name)
    if value is None:
        if required:
            raise ConfigError("missing section", name)
        return None
    if not isinstance(value, dict):
        raise ConfigError("expected a JSON object", name)
    try:
        if cls is ModelConfig or cls is TrainConfig:
            return cls.from_dict(value, name)
        return cls.from_dict(value)
    except TypeError as exc:
        raise ConfigError(str(exc), name) from None


def experiment_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", "config")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}", "config")
    exp = ExperimentConfig()
    kwargs = {}
    for name, cls in (("task", TaskSpec), ("teacher", ModelConfig), ("student", ModelConfig), ("train", TrainConfig),
                      ("teacher_train", TrainConfig)):
        parsed = _section(doc, name, cls)
        if parsed is not None:
            kwargs[name] = parsed
    distill = doc.get("distill", exp.distill)
    if not isinstance(distill, dict):
        raise ConfigError("expected a JSON object", "distill")
    kwargs["distill"] = dict(distill)
    paths = doc.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("expected a JSON object", "paths")
    kwargs["paths"] = dict(paths)
    exp = dataclasses.replace(exp, **kwargs)
    exp.distill_config()  # validate early
    seed = os.environ.get(SEED_ENV)
    if seed not in (None, ""):
        try:
            exp = exp.with_seed(int(seed))
        except ValueError:
            raise ConfigError(f"must be an integer, got {seed!r}", SEED_ENV) from None
    return exp


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}", "config") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}", "config") from None
    return experiment_from_dict(doc)


def param_ratio(teacher: ModelConfig, student: ModelConfig, **geometry) -> float:
    t = dataclasses.replace(teacher, **geometry)
    s = dataclasses.replace(student, **geometry)
    return analytic_param_count(s) / analytic_param_count(t)


def repro_distill_config(label: str, n_t: int, n_s: int) -> DistillConfig:
    method, variant, eta, lam = REPRO_METHODS[label]
    mapping = generate_mapping(variant, n_t, n_s) if variant else None
    return DistillConfig(method, eta, lam, mapping)


def run_repro(exp: ExperimentConfig, out_dir, labels=("none", "rkd", "pkd", "rc", "oc", "sc", "cc"), seeds=(0,),
              teacher_ckpt=None, corpus=None) -> dict:
    """Train (or reuse) a teacher, distill one student per label and seed, score on test.

    Every student uses ``exp.train`` unchanged apart from its seeds, so step
    budgets are equal across rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = corpus if corpus is not None else generate_corpus(exp.task)
    started = time.time()
    if teacher_ckpt is None:
        teacher_ckpt = out_dir / "teacher"
        log.info("training teacher -> %s", teacher_ckpt)
        train_teacher(exp.teacher, exp.task, exp.teacher_train_config, teacher_ckpt, corpus=corpus)
    teacher = load_checkpoint(teacher_ckpt)
    teacher_dev = evaluate(teacher, corpus.dev)
    teacher_test = evaluate(teacher, corpus.test)
    log.info("teacher dev_acc %.4f test_acc %.4f", teacher_dev["token_accuracy"], teacher_test["token_accuracy"])

    n_t, n_s = teacher.model.config.enc_layers, exp.student.enc_layers
    rows = []
    for label in labels:
        if label not in REPRO_METHODS:
            raise ConfigError(f"unknown row {label!r}; expected one of {sorted(REPRO_METHODS)}", "repro.methods")
        dc = repro_distill_config(label, n_t, n_s)
        if dc.mapping is not None:
            log.info("%s mapping %s", REPRO_LABELS[label], dc.mapping.describe())
        per_seed = []
        for seed in seeds:
            result = distill_student(exp.student, teacher, dc, exp.task, exp.train.with_seed(seed),
                                     out_dir / f"{label}_seed{seed}", corpus=corpus)
            test = evaluate(result.model, corpus.test)
            per_seed.append({"seed": seed, "steps": len(result.history), "dev_acc": result.best_metrics["dev_acc"],
                             "test_acc": test["token_accuracy"], "test_bleu": test["bleu"]})
            log.info("%s seed %d test_acc %.4f bleu %.2f", REPRO_LABELS[label], seed, test["token_accuracy"],
                     test["bleu"])
        rows.append({
            "label": REPRO_LABELS[label], "key": label, "method": dc.method,
            "mapping": dc.mapping.describe() if dc.mapping is not None else "",
            "eta": dc.eta, "lambda": dc.lam, "beta": dc.weights.beta,
            "mean_test_acc": float(np.mean([r["test_acc"] for r in per_seed])),
            "std_test_acc": float(np.std([r["test_acc"] for r in per_seed])),
            "mean_test_bleu": float(np.mean([r["test_bleu"] for r in per_seed])),
            "runs": per_seed,
        })
    report = {
        "teacher": {"dev_acc": teacher_dev["token_accuracy"], "test_acc": teacher_test["token_accuracy"],
                    "test_bleu": teacher_test["bleu"], "params": analytic_param_count(teacher.model.config)},
        "student_params": analytic_param_count(exp.student),
        "param_ratio_desk": param_ratio(teacher.model.config, exp.student),
        "param_ratio_full_scale": param_ratio(teacher.model.config, exp.student, **FULL_SCALE_GEOMETRY),
        "rows": rows,
        "seeds": list(seeds),
        "seconds": round(time.time() - started, 1),
    }
    (out_dir / "repro.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def format_repro_table(report: dict) -> str:
    t = report["teacher"]
    lines = [
        f"{'model':<8} {'mapping':<28} {'test acc':>9} {'+/-':>6} {'BLEU':>7}",
        f"{'Teacher':<8} {'':<28} {100 * t['test_acc']:9.2f} {'':>6} {t['test_bleu']:7.2f}",
    ]
    for row in report["rows"]:
        lines.append(f"{row['label']:<8} {row['mapping']:<28} {100 * row['mean_test_acc']:9.2f} "
                     f"{100 * row['std_test_acc']:6.2f} {row['mean_test_bleu']:7.2f}")
    lines.append(f"student/teacher params: {report['param_ratio_desk']:.3f} at desk scale, "
                 f"{report['param_ratio_full_scale']:.3f} at d=512, ff=2048, 32K vocab")
    return "\n".join(lines)
