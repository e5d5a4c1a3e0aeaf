"""Compare the compiled row kernels with the numpy fallback.

Part one times each kernel directly on float32 rows shaped like the
attention and layer-norm inputs of the desk-scale models. Part two times a
full student training step in a subprocess per backend (the backend is fixed
at import, so ``CKD_PURE_PYTHON`` has to be set before ``ckd`` loads).

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --rows 16384 --cols 64 --repeat 50
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ckd.tensor import _ref_kernels as ref

try:
    from ckd.tensor import _fast_kernels as fast
except ImportError:
    fast = None

STEP_SNIPPET = """
import json, time
import numpy as np
from ckd import tensor as T
from ckd.tensor import BACKEND
from ckd.tasks import TaskSpec, generate_corpus, collate
from ckd.transformer import ModelConfig, init_model, forward
from ckd.distill import hard_loss
spec = TaskSpec(n_train=256, n_dev=0, n_test=0)
batch = collate(generate_corpus(spec).train[:64])
model = init_model(ModelConfig.student(vocab_size=spec.model_vocab, max_len=16))
rng = np.random.default_rng(0)
def step():
    tr = forward(model, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask, "train", rng)
    T.backward(hard_loss(tr.logits, batch.tgt_out, batch.tgt_mask, 0.1))
    model.zero_grad()
step()
times = []
for _ in range({repeat}):
    t = time.perf_counter(); step(); times.append(time.perf_counter() - t)
print(json.dumps({{"backend": BACKEND, "ms": 1000 * float(np.median(times))}}))
"""


def kernel_cases(rows, cols, rng):
    x = rng.normal(size=(rows, cols)).astype(np.float32)
    g = rng.normal(size=(rows, cols)).astype(np.float32)
    gamma = rng.normal(size=cols).astype(np.float32)
    beta = rng.normal(size=cols).astype(np.float32)

    def cases(mod):
        y = mod.softmax_fwd(x)
        ly = mod.log_softmax_fwd(x)
        _, xhat, rstd = mod.layer_norm_fwd(x, gamma, beta, 1e-5)
        return {
            "softmax_fwd": lambda: mod.softmax_fwd(x),
            "softmax_bwd": lambda: mod.softmax_bwd(g, y),
            "log_softmax_fwd": lambda: mod.log_softmax_fwd(x),
            "log_softmax_bwd": lambda: mod.log_softmax_bwd(g, ly),
            "layer_norm_fwd": lambda: mod.layer_norm_fwd(x, gamma, beta, 1e-5),
            "layer_norm_bwd": lambda: mod.layer_norm_bwd(g, xhat, rstd, gamma),
        }

    return cases


def best_ms(fn, repeat):
    return 1000 * min(timeit.repeat(fn, number=1, repeat=repeat))


def training_step(pure, repeat):
    env = dict(os.environ, CKD_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=64 * 4 * 13)
    parser.add_argument("--cols", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=30)
    parser.add_argument("--step-repeat", type=int, default=10)
    parser.add_argument("--skip-step", action="store_true", help="only time the kernels")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = kernel_cases(args.rows, args.cols, rng)
    ref_cases = cases(ref)
    fast_cases = cases(fast) if fast is not None else {}
    print(f"kernels on float32 [{args.rows} x {args.cols}], best of {args.repeat}")
    print(f"{'kernel':<18} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in ref_cases.items():
        t_ref = best_ms(fn, args.repeat)
        if name in fast_cases:
            t_fast = best_ms(fast_cases[name], args.repeat)
            print(f"{name:<18} {t_ref:10.3f} {t_fast:10.3f} {t_ref / t_fast:8.2f}")
        else:
            print(f"{name:<18} {t_ref:10.3f} {'n/a':>10} {'':>8}")
    if fast is None:
        print("compiled extension not built; only the numpy fallback was timed")

    if not args.skip_step:
        print(f"\nstudent 2+2 d=64 training step, batch 64, median of {args.step_repeat}")
        for pure in (True, False):
            res = training_step(pure, args.step_repeat)
            print(f"{res['backend']:<8} {res['ms']:8.1f} ms")


if __name__ == "__main__":
    main()
