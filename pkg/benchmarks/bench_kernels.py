"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--epoch]

Each kernel is timed on shapes typical of default-size training (batch 64,
hidden 512, 20k vocabulary). ``--epoch`` additionally times one training
epoch on the toy corpus in two subprocesses, one with ``SAVAE_NO_NUMBA=1``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from savae import kernels


def cases(rng: np.random.Generator):
    V, B, H = 20_000, 64, 512
    logits = rng.normal(size=(B * 4, V)).astype(np.float32)
    targets = rng.integers(0, V, size=B * 4)
    emb_grad = np.zeros((V, 200), np.float32)
    ids = rng.integers(0, V, size=B * 20)
    rows = rng.normal(size=(ids.size, 200)).astype(np.float32)
    a = rng.integers(0, 40, size=60)
    b = rng.integers(0, 40, size=60)
    p = rng.normal(size=(H, 4 * H)).astype(np.float32)
    g = rng.normal(size=p.shape).astype(np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    def adam(impl):
        return lambda: impl.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-3, 1e-8)

    return {
        "softmax_xent 256x20000": lambda impl: (lambda: impl.softmax_xent(logits, targets)),
        "scatter_add_rows 1280x200": lambda impl: (lambda: impl.scatter_add_rows(emb_grad, ids, rows)),
        "edit_distance 60x60": lambda impl: (lambda: impl.edit_distance(a, b)),
        "adam_update 512x2048": adam,
        "sum_squares 512x2048": lambda impl: (lambda: impl.sum_squares(g)),
    }


def best_ms(fn, repeat: int) -> float:
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


EPOCH_SNIPPET = """
import time
from savae import toy
from savae.corpus import build_vocabs
from savae.training import TrainConfig, train
exs = toy.toy_corpus(200, seed=0)
vocabs = build_vocabs(exs)
train(exs[:20], vocabs, TrainConfig(max_epochs=1, batch_size=10))  # warm-up
t = time.perf_counter()
train(exs, vocabs, TrainConfig(max_epochs=1, batch_size=64))
print(time.perf_counter() - t)
"""


def epoch_seconds(disable_numba: bool) -> float:
    env = dict(os.environ)
    env.pop("SAVAE_NO_NUMBA", None)
    if disable_numba:
        env["SAVAE_NO_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epoch", action="store_true", help="also time one toy training epoch per backend")
    args = ap.parse_args(argv)

    if kernels.numba_impl is None:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, make in cases(rng).items():
        t_np = best_ms(make(kernels.numpy_impl), args.repeat)
        t_nb = best_ms(make(kernels.numba_impl), args.repeat)
        print(f"{name:<28}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")
    if args.epoch:
        s_np = epoch_seconds(True)
        s_nb = epoch_seconds(False)
        print(f"{'toy epoch (200 sentences)':<28}{s_np * 1e3:>12.0f}{s_nb * 1e3:>12.0f}{s_np / s_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
