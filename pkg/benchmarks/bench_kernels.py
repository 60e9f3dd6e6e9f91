"""Time the numba kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 50]

Shapes follow the default model with a batch of 8 groups: encoder rows are
8 groups x 20 tokens, decoder rows 8 x 40, attention rows one per head and
query. A full pretraining step (forward and backward) is timed as well.
"""

import argparse
import timeit

import numpy as np

from fmae import _kernels as K
from fmae.config import ModelConfig
from fmae.masking import sample_mask_plan, stack_plans
from fmae.model import as_trainable, init_params, pretrain_forward


def kernel_cases(rng):
    ln_x = rng.normal(size=(160, 108)).astype(np.float32)
    gamma, beta = np.ones(108, np.float32), np.zeros(108, np.float32)
    _, xhat, rstd = K.np_layer_norm_fwd(ln_x, gamma, beta, 1e-6)
    mlp = rng.normal(size=(320, 288)).astype(np.float32)
    att = rng.normal(size=(8 * 4 * 40, 40)).astype(np.float32)
    probs = K.np_softmax_fwd(att)
    return {
        "layer_norm_fwd": lambda: K.layer_norm_fwd(ln_x, gamma, beta, 1e-6),
        "layer_norm_bwd": lambda: K.layer_norm_bwd(ln_x, xhat, rstd, gamma),
        "gelu_fwd": lambda: K.gelu_fwd(mlp),
        "gelu_bwd": lambda: K.gelu_bwd(mlp, mlp),
        "softmax_fwd": lambda: K.softmax_fwd(att),
        "softmax_bwd": lambda: K.softmax_bwd(probs, att),
    }


def train_step(rng):
    cfg = ModelConfig()
    params = init_params(cfg, rng)
    values = rng.normal(size=(8, 5, cfg.l, cfg.c)).astype(np.float32)
    present = np.ones((8, 5, cfg.c), bool)
    cm, pm = stack_plans([sample_mask_plan(5, cfg.c, cfg.s, 0.4, 0.5, rng) for _ in range(8)])

    def step():
        trainable = as_trainable(params)
        pretrain_forward(values, present, cm, pm, trainable, cfg).loss.backward()

    return step


def best_of(fn, repeat: int) -> float:
    fn()  # warm up (and compile, for numba)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    backends = [b for b in ("numpy", "numba") if b in K._BACKENDS]
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    cases["pretrain step"] = train_step(rng)
    times = {}
    for b in backends:
        K.set_backend(b)
        for name, fn in cases.items():
            reps = max(3, args.repeat // 10) if name == "pretrain step" else args.repeat
            times[name, b] = best_of(fn, reps)
    header = f"{'case':<16}" + "".join(f"{b + ' [us]':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name in cases:
        row = f"{name:<16}" + "".join(f"{times[name, b] * 1e6:>14.1f}" for b in backends)
        if len(backends) == 2:
            row += f"{times[name, 'numpy'] / times[name, 'numba']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
