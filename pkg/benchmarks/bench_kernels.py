"""Compare the numba and numpy attention kernels.

Kernel timings call both implementations directly in one process.  The
training-step timing runs in subprocesses with ``LOPA_NUMBA`` set either
way, since the backend is chosen at import time.

    python benchmarks/bench_kernels.py [--repeats N]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from lopa import kernels

SHAPES = [  # (B, H, dH, Lq, Lk)
    (32, 4, 16, 12, 22),
    (32, 4, 16, 12, 37),
    (64, 4, 16, 32, 42),
]

STEP_SNIPPET = """
import json, time
import numpy as np
from lopa import kernels, training
cfg = training.TrainConfig(method="lopa", task="mixed", epochs=0)
bundle = training.bundle_for(cfg)
task = training.make_task(cfg.task, 0, 256, 16, cfg.seq_len)
x, y = task.train_tokens[:32], task.train_labels[:32]
step = lambda: bundle.forward_backward(x, lambda lg: training.cross_entropy(lg, y))
step()  # compile / warm up
t = time.perf_counter()
for _ in range({n}):
    step()
print(json.dumps({{"backend": kernels.backend(), "ms": 1e3 * (time.perf_counter() - t) / {n}}}))
"""


def best_ms(fn, repeats):
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeats))


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for B, H, dh, lq, lk in SHAPES:
        q = rng.standard_normal((B, H, dh, lq))
        k = rng.standard_normal((B, H, dh, lk))
        v = rng.standard_normal((B, H, dh, lk))
        dout = rng.standard_normal((B, H, dh, lq))
        scale = 1.0 / np.sqrt(dh)
        o1, p1 = kernels.attention_forward_numpy(q, k, v, scale)
        o2, p2 = kernels.attention_forward_numba(q, k, v, scale)  # compiles
        g1 = kernels.attention_backward_numpy(q, k, v, p1, scale, dout)
        g2 = kernels.attention_backward_numba(q, k, v, p2, scale, dout)
        err = max(np.abs(o1 - o2).max(), *(np.abs(a - b).max() for a, b in zip(g1, g2)))
        rows.append({
            "shape": [B, H, dh, lq, lk],
            "fwd_numpy_ms": best_ms(lambda: kernels.attention_forward_numpy(q, k, v, scale), repeats),
            "fwd_numba_ms": best_ms(lambda: kernels.attention_forward_numba(q, k, v, scale), repeats),
            "bwd_numpy_ms": best_ms(lambda: kernels.attention_backward_numpy(q, k, v, p1, scale, dout), repeats),
            "bwd_numba_ms": best_ms(lambda: kernels.attention_backward_numba(q, k, v, p2, scale, dout), repeats),
            "max_abs_diff": float(err),
        })
    return rows


def bench_step(n):
    out = []
    for flag in ("1", "0"):
        env = dict(os.environ, LOPA_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def bench_client_prepare(repeats):
    """Per-request cost of computing and packing a prompt on the client."""
    from lopa.bundle import build_bundle
    from lopa.fm import FMConfig, ToyTransformer
    from lopa.serving.client import client_prepare

    fm = ToyTransformer(FMConfig())
    tokens = np.arange(97, 109)
    out = {}
    for method in ("pt", "additive", "lopa"):
        b = build_bundle(fm, method, m=10, r=2)
        out[method] = best_ms(lambda: client_prepare(b.encoder, b.composer, tokens), repeats)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--steps", type=int, default=50)
    args = ap.parse_args()
    if kernels.attention_forward_numba is None:
        sys.exit("numba is not importable; nothing to compare")
    print(f"{'shape':>22} {'fwd np':>8} {'fwd nb':>8} {'bwd np':>8} {'bwd nb':>8} {'max diff':>9}")
    for r in bench_kernels(args.repeats):
        print(f"{str(tuple(r['shape'])):>22} {r['fwd_numpy_ms']:8.3f} {r['fwd_numba_ms']:8.3f} "
              f"{r['bwd_numpy_ms']:8.3f} {r['bwd_numba_ms']:8.3f} {r['max_abs_diff']:9.1e}")
    for r in bench_step(args.steps):
        print(f"training step ({r['backend']}): {r['ms']:.2f} ms")
    for method, ms in bench_client_prepare(args.repeats).items():
        print(f"client_prepare ({method}): {ms:.3f} ms")


if __name__ == "__main__":
    main()
