#!/usr/bin/env python3
"""Compare the numba kernels against the pure-numpy fallback.

Runs both backends in-process on the two hot paths (bilinear resize at
training resolutions, Levenshtein over answer-length strings) and prints a
table. The numpy timings here are the exact code selected by
TINYVLM_NO_NUMBA=1.

Usage: python benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from tinyvlm import kernels


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if kernels.active_backend() != "numba":
        print("warning: numba backend unavailable; both columns run numpy")

    rng = np.random.default_rng(0)
    rows = []

    # bilinear resize: 1820-long-side page down to a 364 tile and back up
    page = rng.random((1820, 1260, 3))
    for oh, ow, label in [(364, 252, "resize 1820x1260 -> 364x252"),
                          (1456, 1008, "resize 1820x1260 -> 1456x1008")]:
        kernels.bilinear_resize(page, oh, ow)  # jit warmup
        fast = best_of(lambda: kernels.bilinear_resize(page, oh, ow), args.repeats)
        slow = best_of(lambda: kernels._bilinear_resize_numpy(page, oh, ow), args.repeats)
        rows.append((label, fast, slow))

    # levenshtein: batch of answer-length string pairs
    alphabet = list("abcdefghijklmnopqrstuvwxyz 0123456789")
    pairs = [
        (
            "".join(rng.choice(alphabet, size=rng.integers(5, 60))),
            "".join(rng.choice(alphabet, size=rng.integers(5, 60))),
        )
        for _ in range(2000)
    ]
    kernels.levenshtein("warm", "up")

    def fast_lev():
        for a, b in pairs:
            kernels.levenshtein(a, b)

    def slow_lev():
        for a, b in pairs:
            kernels._levenshtein_py(
                np.frombuffer(a.encode("utf-32-le"), dtype=np.uint32),
                np.frombuffer(b.encode("utf-32-le"), dtype=np.uint32),
            )

    rows.append(("levenshtein x2000 pairs", best_of(fast_lev, args.repeats),
                 best_of(slow_lev, args.repeats)))

    backend = kernels.active_backend()
    print(f"\nactive backend: {backend}")
    print(f"{'case':<34}{backend + ' (s)':>14}{'numpy (s)':>14}{'speedup':>10}")
    for label, fast, slow in rows:
        print(f"{label:<34}{fast:>14.4f}{slow:>14.4f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
