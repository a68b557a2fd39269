"""Compare the numba and numpy convolution backends on shapes taken from
the actual networks (encoder stride-2 stages, dilated generator stack,
discriminator). Prints GMAC/s per op and the end-to-end winner.

Run:  python benchmarks/bench_kernels.py [--repeats N]
Both backends are exercised in one process regardless of MMFORECAST_BACKEND.
"""

import argparse
import time

import numpy as np

from mmforecast import kernels as K

CASES = [
    # (label, n, ci, co, h, w, k, stride, pad, dilation)
    ("encoder 6->16 s2 64x128", 8, 6, 16, 64, 128, 3, 2, 1, 1),
    ("encoder 32->64 s2 16x32", 8, 32, 64, 16, 32, 3, 2, 1, 1),
    ("generator 224x64 d2 8x16", 8, 224, 64, 8, 16, 3, 1, 2, 2),
    ("generator 64x64 d4 8x16", 8, 64, 64, 8, 16, 3, 1, 4, 4),
    ("discriminator 256x64 8x16", 8, 256, 64, 8, 16, 3, 1, 1, 1),
]


def macs(n, ci, co, ho, wo, k):
    return n * ci * co * ho * wo * k * k


def bench(fn, repeats):
    fn()  # warmup / jit compile
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not K._HAVE_NJIT:
        print("numba not installed; benchmarking numpy path only")

    rng = np.random.default_rng(0)
    totals = {"numpy": 0.0, "numba": 0.0}
    header = f"{'case':<28} {'op':<10} {'numpy':>12} {'numba':>12}"
    print(header)
    print("-" * len(header))
    for label, n, ci, co, h, w, k, stride, pad, dil in CASES:
        x = rng.normal(size=(n, ci, h, w))
        wgt = rng.normal(size=(co, ci, k, k))
        b = rng.normal(size=co)
        ho = K.conv_out_size(h, k, stride, pad, dil)
        wo = K.conv_out_size(w, k, stride, pad, dil)
        dy = rng.normal(size=(n, co, ho, wo))
        gmac = macs(n, ci, co, ho, wo, k) / 1e9

        ops = {
            "forward": (
                lambda: K._np_conv_forward(x, wgt, b, stride, pad, dil),
                lambda: K._nb_conv_forward(K._pad_input(x, pad), wgt, b,
                                           stride, dil, ho, wo)),
            "dinput": (
                lambda: K._np_conv_backward_input(dy, wgt, x.shape, stride, pad, dil),
                lambda: K._nb_conv_backward_input_padded(
                    np.ascontiguousarray(dy), wgt, n, ci,
                    h + 2 * pad, w + 2 * pad, stride, dil)),
            "dweights": (
                lambda: K._np_conv_backward_weights(dy, x, wgt.shape, stride, pad, dil),
                lambda: K._nb_conv_backward_weights_padded(
                    np.ascontiguousarray(dy), K._pad_input(x, pad),
                    co, ci, k, k, stride, dil)),
        }
        for opname, (np_fn, nb_fn) in ops.items():
            t_np = bench(np_fn, args.repeats)
            totals["numpy"] += t_np
            np_col = f"{gmac / t_np:8.2f} GM/s"
            if K._HAVE_NJIT:
                t_nb = bench(nb_fn, args.repeats)
                totals["numba"] += t_nb
                nb_col = f"{gmac / t_nb:8.2f} GM/s"
            else:
                nb_col = "-"
            print(f"{label:<28} {opname:<10} {np_col:>12} {nb_col:>12}")

    print()
    print(f"total numpy time: {totals['numpy']:.3f} s")
    if K._HAVE_NJIT:
        print(f"total numba time: {totals['numba']:.3f} s")
        winner = "numpy" if totals["numpy"] <= totals["numba"] else "numba"
        ratio = max(totals.values()) / min(totals.values())
        print(f"winner on this machine: {winner} ({ratio:.1f}x faster overall)")
        print("set MMFORECAST_BACKEND accordingly (default is numpy)")


if __name__ == "__main__":
    main()
