"""Paired ablations on the toy problem.

    python benchmarks/ablations.py ranking [--bits 4 5 6] [--seeds 10]
    python benchmarks/ablations.py mixed [--base 8] [--hot-layer 0] [--seeds 10]

``ranking`` calibrates each seeded toy model with gamma=0.1 and gamma=0 and
prints the attention-pair inversion counts on held-out images. ``mixed``
scales one layer by 10, allocates bits at the uniform-size budget and
compares top-1 agreement with the uniform assignment.
"""
import argparse
import time

import numpy as np

from vitq import mixed
from vitq.evaluate import compare
from vitq.search import SearchConfig, calibrate_model
from vitq.toy import toy_problem


def ranking(bits_list, seeds):
    t = time.perf_counter()
    for bits in bits_list:
        diffs = []
        for seed in range(seeds):
            model, (cx, _), (ex, _) = toy_problem(seed, n_calib=64, n_eval=128)
            inv = {}
            for gamma in (0.1, 0.0):
                qm = calibrate_model(model, cx, SearchConfig(gamma=gamma), bits)
                inv[gamma] = compare(model, qm.model, qm.hooks, ex)["inversions"]
            diffs.append(inv[0.1] - inv[0.0])
            print(f"bits {bits} seed {seed}: inversions {inv[0.1]} (gamma 0.1) vs {inv[0.0]} (gamma 0) "
                  f"[{time.perf_counter() - t:.0f} s]", flush=True)
        print(f"bits {bits}: fewer inversions in {sum(d < 0 for d in diffs)}/{seeds}, "
              f"median change {np.median(diffs):+.0f}")


def mixed_placement(base, hot_layer, seeds):
    bit_set = list(range(base - 2, base + 3))
    wins = 0
    for seed in range(seeds):
        model, (cx, _), (ex, _) = toy_problem(seed, n_calib=64, n_eval=256, hot_layer=hot_layer)
        recs = mixed.sensitivity_table(model, cx, bit_set)
        alloc = mixed.allocate_bits(recs, bit_set, mixed.budget_for_average_bits(model.config, base))
        mq = calibrate_model(model, cx, SearchConfig(), {**alloc.bits, "base": base})
        uq = calibrate_model(model, cx, SearchConfig(), base)
        am = compare(model, mq.model, mq.hooks, ex)["top1_agreement"]
        au = compare(model, uq.model, uq.hooks, ex)["top1_agreement"]
        wins += am >= au
        print(f"seed {seed}: bits {alloc.bits} mixed {am:.3f} uniform {au:.3f}", flush=True)
    print(f"base {base}, x10 layer {hot_layer}: mixed >= uniform in {wins}/{seeds}")


def main():
    ap = argparse.ArgumentParser()
    sub = ap.add_subparsers(dest="which", required=True)
    r = sub.add_parser("ranking")
    r.add_argument("--bits", type=int, nargs="+", default=[4, 5, 6])
    r.add_argument("--seeds", type=int, default=10)
    m = sub.add_parser("mixed")
    m.add_argument("--base", type=int, default=8)
    m.add_argument("--hot-layer", type=int, default=0)
    m.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    if args.which == "ranking":
        ranking(args.bits, args.seeds)
    else:
        mixed_placement(args.base, args.hot_layer, args.seeds)


if __name__ == "__main__":
    main()
