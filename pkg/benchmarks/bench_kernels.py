"""Compiled extension vs numpy fallback on calibration-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--calibrate]

Prints per-call times for each kernel under both backends, and with
``--calibrate`` the wall time of one full 8-bit toy calibration per backend
(run in a subprocess so the backend is chosen at import).
"""
import argparse
import subprocess
import sys
import timeit

import numpy as np

from vitq import _fallback

try:
    from vitq import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    x = rng.standard_normal((64, 17, 32)).astype(np.float32)
    scores = rng.standard_normal((64, 4 * 17, 17))
    noisy = (scores + 0.05 * rng.standard_normal(scores.shape)).astype(np.float32)
    o = rng.standard_normal((64, 17 * 32)).astype(np.float32)
    oh = o + np.float32(0.01) * rng.standard_normal(o.shape).astype(np.float32)
    m = rng.standard_normal((17, 17))
    signs = {k.__name__: k.pair_signs(scores) for k in (_fallback, _kernels) if k is not None}
    return {
        "quant_dequant 64x17x32": lambda k: k.quant_dequant(x, 0.02, 8),
        "pearson_rows 64x544": lambda k: k.pearson_rows(o, oh),
        "ranking_loss_rows 64x68x17": lambda k: k.ranking_loss_rows(scores, noisy, 0.2),
        "ranking_loss_signed 64x68x17": lambda k: k.ranking_loss_signed(signs[k.__name__], noisy, 0.2),
        "inversion_count_rows 64x68x17": lambda k: k.inversion_count_rows(scores, noisy),
        "singular_values 17x17": lambda k: k.singular_values(m),
    }


def bench(repeat):
    rng = np.random.default_rng(0)
    backends = [("python", _fallback)] + ([("cython", _kernels)] if _kernels else [])
    print(f"{'kernel':32s} " + " ".join(f"{n:>12s}" for n, _ in backends) + "   speedup")
    for name, fn in cases(rng).items():
        times = []
        for _, mod in backends:
            fn(mod)  # warm-up
            times.append(min(timeit.repeat(lambda: fn(mod), number=repeat, repeat=3)) / repeat)
        cols = " ".join(f"{t * 1e3:10.3f}ms" for t in times)
        speed = f"{times[0] / times[1]:8.1f}x" if len(times) == 2 else ""
        print(f"{name:32s} {cols} {speed}")


_CALIBRATE = """
import time
from vitq import kernels
from vitq.toy import toy_problem
from vitq.search import calibrate_model
model, (cx, _), _ = toy_problem(0)
t = time.perf_counter()
calibrate_model(model, cx, bits=8)
print(kernels.BACKEND, f"{time.perf_counter() - t:.2f}")
"""


def bench_calibration():
    for env in ({}, {"VITQ_PURE_PYTHON": "1"}):
        import os

        out = subprocess.run([sys.executable, "-c", _CALIBRATE], env={**os.environ, **env},
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"calibrate_model toy 8-bit [{out[0]}]: {out[1]} s")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--calibrate", action="store_true")
    args = ap.parse_args()
    bench(args.repeat)
    if args.calibrate:
        bench_calibration()


if __name__ == "__main__":
    main()
