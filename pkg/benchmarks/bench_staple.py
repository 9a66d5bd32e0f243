"""Compare the compiled EM fusion kernel against the numpy fallback.

Usage: python benchmarks/bench_staple.py [--raters 25] [--voxels 262144]
"""

import argparse
import time

import numpy as np

from diffseg.staple import _em_py

try:
    from diffseg.staple import _em_c
except ImportError:
    _em_c = None


def bench(kernel, D, prior, iters=3):
    R = D.shape[0]
    best = float("inf")
    for _ in range(iters):
        p0 = np.full(R, 0.99)
        q0 = np.full(R, 0.99)
        t0 = time.perf_counter()
        out = kernel.em_run(D, prior, p0, q0, 1e-6, 100)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--raters", type=int, default=25)
    ap.add_argument("--voxels", type=int, default=512 * 512)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    truth = rng.random(args.voxels) < 0.2
    # imperfect raters: flip ~8% of voxels each
    D = np.empty((args.raters, args.voxels), dtype=np.uint8)
    for j in range(args.raters):
        flips = rng.random(args.voxels) < 0.08
        D[j] = np.where(flips, ~truth, truth)
    prior = float(np.clip(D.mean(), 1e-3, 1 - 1e-3))

    t_py, out_py = bench(_em_py, D, prior)
    print(f"numpy fallback : {t_py * 1e3:9.1f} ms  ({out_py[3]} EM iterations)")
    if _em_c is None:
        print("cython kernel  : not built")
        return
    t_c, out_c = bench(_em_c, D, prior)
    print(f"cython kernel  : {t_c * 1e3:9.1f} ms  ({out_c[3]} EM iterations)")
    print(f"speedup        : {t_py / t_c:9.2f}x")
    dw = np.abs(out_py[0] - out_c[0]).max()
    dp = np.abs(out_py[1] - out_c[1]).max()
    print(f"max |Δweights| = {dw:.2e}, max |Δp| = {dp:.2e}")


if __name__ == "__main__":
    main()
