"""Command-line entry points.

Exit codes: 0 success, 2 configuration or validation problem, 3 training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .checkpoint import load_checkpoint
from .errors import CheckpointError, CKDError, ConfigError, DataError, TrainingError
from .experiment import REPRO_METHODS, format_repro_table, load_experiment, run_repro
from .mapper import fusion_param_count, fusion_param_shapes, generate_mapping
from .tasks import generate_corpus
from .trainer import distill_student, evaluate, train_teacher

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3

log = logging.getLogger("ckd")


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_train_teacher(args):
    exp = load_experiment(args.config)
    result = train_teacher(exp.teacher, exp.task, exp.teacher_train_config, args.out)
    _emit({"checkpoint": str(result.checkpoint), **result.best_metrics})
    return EXIT_OK


def cmd_distill(args):
    exp = load_experiment(args.config)
    teacher = load_checkpoint(args.teacher)
    tcfg = teacher.model.config
    dc = exp.distill_config(tcfg.enc_layers, exp.student.enc_layers, tcfg.dec_layers, exp.student.dec_layers)
    if dc.mapping is not None:
        print(f"mapping ({dc.mapping.variant}): {dc.mapping.describe()}")
    print(f"weights: beta={dc.weights.beta:.4g} eta={dc.eta:.4g} lambda={dc.lam:.4g}")
    result = distill_student(exp.student, teacher, dc, exp.task, exp.train, args.out)
    last = result.history[-1] if result.history else {}
    components = {k: last.get(k) for k in ("hard", "soft", "layer", "attn", "total")}
    _emit({"checkpoint": str(result.checkpoint), "last_step": components, **result.best_metrics})
    return EXIT_OK


def cmd_eval(args):
    exp = load_experiment(args.config)
    ckpt = load_checkpoint(args.ckpt)
    pairs = generate_corpus(exp.task).split(args.split)
    metrics = evaluate(ckpt, pairs)
    _emit({"token_accuracy": metrics["token_accuracy"], "bleu": metrics["bleu"]})
    return EXIT_OK


def cmd_plan_mapping(args):
    if args.d < 1:
        raise ConfigError("must be positive", "d")
    mapping = generate_mapping(args.variant, args.teacher_layers, args.student_layers)
    shapes = fusion_param_shapes(mapping, args.d)
    print(f"{'student':>7}  {'teacher layers':<20} {'W shape':<14} b shape")
    for i, (entry, (w, b)) in enumerate(zip(mapping.entries, shapes), 1):
        print(f"{i:>7}  {'{' + ','.join(map(str, entry)) + '}':<20} {f'{w[0]}x{w[1]}':<14} {b[0]}")
    print(mapping.describe())
    _emit({
        "variant": mapping.variant,
        "teacher_layers": args.teacher_layers,
        "student_layers": args.student_layers,
        "d": args.d,
        "mapping": [list(e) for e in mapping.entries],
        "fusion_shapes": [{"W": list(w), "b": list(b)} for w, b in shapes],
        "added_params": fusion_param_count(mapping, args.d),
    })
    return EXIT_OK


def cmd_repro(args):
    exp = load_experiment(args.config)
    labels = args.methods.split(",") if args.methods else list(REPRO_METHODS)
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_repro(exp, args.out, labels, seeds, teacher_ckpt=args.teacher)
    print(format_repro_table(report))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ckd", description="Knowledge-distillation workbench for toy seq2seq tasks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a teacher with the hard loss")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", default="dev")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan-mapping", help="print a layer mapping and its fusion parameters")
    p.add_argument("--variant", required=True)
    p.add_argument("--teacher-layers", type=int, required=True)
    p.add_argument("--student-layers", type=int, required=True)
    p.add_argument("--d", type=int, default=64)
    p.set_defaults(func=cmd_plan_mapping)

    p = sub.add_parser("repro", help="teacher, then one student per method, then a comparison table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--teacher", help="reuse this teacher checkpoint instead of training one")
    p.add_argument("--methods", help=f"comma list from {','.join(REPRO_METHODS)}")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if getattr(args, "split", None) not in (None, "dev", "test"):
        print(f"error: split: must be 'dev' or 'test', got {args.split!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigError, CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
