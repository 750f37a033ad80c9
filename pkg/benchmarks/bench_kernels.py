"""Time each hot kernel with numba and with numpy, plus a training step.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes are those of a desk-size training batch (64 pairs, ~64 frames,
D=16, 4 heads, 12 phonemes).  The training-step row runs the whole loop in
a subprocess per mode, since the mode is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from kwsmatch import kernels as K


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return 1e3 * min(times)


STEP_SNIPPET = """
import time
from kwsmatch.frontend import GenConfig, generate_corpus
from kwsmatch import trainer
c = generate_corpus(GenConfig(), {"positive": 400, "easy": 400, "hard": 400}, seed=0)
trainer.train(c, trainer.desk_config(max_steps=2, val_fraction=0.0))
t = time.perf_counter()
trainer.train(c, trainer.desk_config(max_steps=30, val_fraction=0.0))
print(1e3 * (time.perf_counter() - t) / 30)
"""


def step_time(disable):
    env = dict(os.environ, KWSMATCH_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true", help="skip the training-step timing")
    args = ap.parse_args()
    if not K.USE_NUMBA:
        sys.exit("numba unavailable or disabled; nothing to compare")
    rng = np.random.default_rng(0)
    B, H, n, D, V = 64, 4, 64, 16, 12
    scores = rng.normal(size=(B, H * n, n)).astype(np.float32)
    mask = np.ones((B, n), bool)
    mask[: B // 2, n - 8:] = False
    p = K.softmax(scores, mask, use_numba=False)
    g = rng.normal(size=p.shape).astype(np.float32)
    x2 = rng.normal(size=(B * n, D)).astype(np.float32)
    gamma, beta = np.ones(D, np.float32), np.zeros(D, np.float32)
    _, xhat, inv = K.layer_norm(x2, gamma, beta, 1e-5, use_numba=False)
    logits = rng.normal(size=(B, n, V + 1))
    lengths = rng.integers(n // 2, n + 1, size=B)
    tlen = rng.integers(3, 13, size=B)
    targets = np.zeros((B, 12), np.int64)
    for b in range(B):
        targets[b, : tlen[b]] = rng.integers(0, V, size=tlen[b])

    cases = {
        "softmax forward": lambda u: K.softmax(scores, mask, use_numba=u),
        "softmax backward": lambda u: K.softmax_backward(p, g, use_numba=u),
        "layer-norm forward": lambda u: K.layer_norm(x2, gamma, beta, 1e-5, use_numba=u),
        "layer-norm backward": lambda u: K.layer_norm_backward(x2, xhat, inv, gamma, use_numba=u),
        "ctc loss+grad": lambda u: K.ctc_batch(logits, lengths, targets, tlen, V, use_numba=u),
    }
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases.items():
        t_np = best_of(lambda: fn(False), args.repeat)
        t_nb = best_of(lambda: fn(True), args.repeat)
        print(f"{name:<22}{t_np:10.3f}{t_nb:10.3f}{t_np / t_nb:9.2f}")
    if not args.no_step:
        t_np, t_nb = step_time(True), step_time(False)
        print(f"{'training step':<22}{t_np:10.1f}{t_nb:10.1f}{t_np / t_nb:9.2f}")


if __name__ == "__main__":
    main()
