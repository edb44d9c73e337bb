"""Time the numba kernels against the numpy fallback.

Kernel timings call both backends in-process. The end-to-end inner step runs
in two subprocesses so ``PTA_DISABLE_NUMBA`` picks the backend the same way
it does in normal use.

    python3 benchmarks/bench_kernels.py [--repeat 7] [--skip-e2e]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pta import kernels

E2E = r"""
import time, numpy as np
from pta import kernels
from pta.data_synth import dataset_from_config
from pta.trainer import TrainConfig, init_state
from pta.meta_purify import inner_step
ds = dataset_from_config({"n_samples": 600})
cfg = TrainConfig()
st = init_state(cfg, ds, 0)
b = ds.train.take(np.arange(cfg.batch_size))
rng = np.random.default_rng(0)
w = st.meta.normalized
step = lambda: inner_step(st.net, st.params, st.opt, b, st.net.modalities, w, cfg.lam, rng)
for _ in range(20):
    step()
best = float("inf")
for _ in range(__REPEAT__):
    t = time.perf_counter()
    for _ in range(50):
        step()
    best = min(best, (time.perf_counter() - t) / 50)
print(kernels.BACKEND, best)
"""


def _cases(rng):
    B, d_in, d_h = 16, 64, 64
    x = rng.standard_normal((B, d_in))
    W = rng.standard_normal((d_in, d_h)) * 0.1
    b = rng.standard_normal(d_h)
    dy = rng.standard_normal((B, d_h))
    z = rng.standard_normal((B * 5, 8))
    W1, b1 = rng.standard_normal((8, 4)), rng.standard_normal(4)
    W2, b2 = rng.standard_normal((4, 8)), rng.standard_normal(8)
    n = 40_000
    p, g = rng.standard_normal(n), rng.standard_normal(n)

    def silu(k):
        return lambda: k.silu(dy)

    def linear_fwd(k):
        return lambda: k.linear_fwd(x, W, b)

    def linear_bwd(k):
        gW, gb = np.zeros_like(W), np.zeros_like(b)
        return lambda: k.linear_bwd(x, W, dy, gW, gb)

    def bottleneck(k):
        gW1, gb1, gW2, gb2 = (np.zeros_like(a) for a in (W1, b1, W2, b2))

        def run():
            y, a = k.bottleneck_fwd(z, W1, b1, W2, b2)
            k.bottleneck_bwd(z, a, W1, W2, y, gW1, gb1, gW2, gb2)

        return run

    def adam(k):
        m, v, q = np.zeros(n), np.zeros(n), p.copy()
        return lambda: k.adam_step(q, g, m, v, 5e-4, 0.9, 0.999, 1e-8, 3)

    return {
        "silu 16x64": silu,
        "linear_fwd 16x64x64": linear_fwd,
        "linear_bwd 16x64x64": linear_bwd,
        "bottleneck fwd+bwd 80x8": bottleneck,
        "adam_step 40k": adam,
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    backends = [kernels.numpy_kernels] + ([kernels.numba_kernels] if kernels.numba_kernels else [])
    print(f"{'kernel':<26}" + "".join(f"{k.name + ' (us)':>14}" for k in backends) + f"{'speedup':>10}")
    for name, make in _cases(rng).items():
        times = []
        for k in backends:
            fn = make(k)
            fn()  # compile / warm up
            loops = 200
            times.append(min(timeit.repeat(fn, number=loops, repeat=repeat)) / loops * 1e6)
        speed = f"{times[0] / times[1]:>9.2f}x" if len(times) == 2 else ""
        print(f"{name:<26}" + "".join(f"{t:>14.2f}" for t in times) + speed)


def bench_e2e(repeat):
    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, PTA_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", E2E.replace("__REPEAT__", str(repeat))], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        results[out[0]] = float(out[1])
    print()
    for name, t in results.items():
        print(f"inner step ({name}): {t * 1e3:.3f} ms")
    if len(results) == 2:
        print(f"end-to-end speedup: {results['numpy'] / results['numba']:.2f}x")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    print(f"active backend: {kernels.BACKEND}")
    bench_kernels(args.repeat)
    if not args.skip_e2e:
        bench_e2e(args.repeat)


if __name__ == "__main__":
    main()
