"""Benchmark the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_backends.py [--repeats 200]

Times the fused batch forward/backward (the training hot loop) and the
batch logits kernel at a few desk-to-FPHA-like problem sizes.
"""

import argparse
import time

import numpy as np

from litegcn.backend import available_backends, get_backend

SIZES = [
    # (K, n, s, C, classes, batch)
    (2, 8, 6, 8, 5, 32),
    (4, 12, 12, 16, 5, 60),
    (8, 21, 12, 16, 45, 128),
    (8, 21, 12, 64, 45, 600),
]


def make_problem(k, n, s, c, classes, batch, seed=0):
    rng = np.random.default_rng(seed)
    return (
        np.ascontiguousarray(rng.normal(size=(k, n, n))),
        np.ascontiguousarray(rng.normal(size=(batch, s, n))),
        rng.integers(classes, size=batch).astype(np.int64),
        np.ascontiguousarray(rng.normal(size=(k, s, c))),
        np.ascontiguousarray(rng.normal(size=(n * c, classes))),
        np.ascontiguousarray(rng.normal(size=classes)),
    )


def time_call(fn, args, repeats):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    header = f"{'K,n,s,C,L,B':>22} | {'kernel':>12} | " + " | ".join(
        f"{name:>10}" for name in backends
    )
    if len(backends) > 1:
        header += " | speedup"
    print(header)
    print("-" * len(header))
    for size in SIZES:
        a, u, labels, w, head_w, head_b = make_problem(*size)
        for kernel, call_args in [
            ("batch_grads", (a, u, labels, w, head_w, head_b, True)),
            ("batch_logits", (a, u, w, head_w, head_b, True)),
        ]:
            times = []
            for name in backends:
                impl = get_backend(name)
                times.append(time_call(getattr(impl, kernel), call_args, args.repeats))
            row = f"{str(size):>22} | {kernel:>12} | " + " | ".join(
                f"{t * 1e6:8.1f}us" for t in times
            )
            if len(times) > 1:
                row += f" | {times[-1] / times[0]:6.2f}x"
            print(row)


if __name__ == "__main__":
    main()
