"""Time im2col / col2im for every available backend on training-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one row per (shape, kernel, backend) with the median wall time and
the speedup of the compiled backend over the numpy one. Outputs are also
compared so a silent mismatch cannot pass as a speedup.
"""
import argparse
import statistics
import time

import numpy as np

from maskseg.tensorkit.kernels import backends

# (name, N, H, W, C, k, stride): padded inputs as the conv layers see them
SHAPES = [
    ("enc.0 64x64", 8, 66, 66, 3, 3, 2),
    ("enc.1 32x32", 8, 34, 34, 16, 3, 2),
    ("sed.0 16x16", 8, 18, 18, 32, 3, 1),
    ("head 16x16", 12, 18, 18, 32, 3, 1),
]


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args(argv)

    found = backends()
    if "cython" not in found:
        print("compiled backend not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'shape':<14} {'kernel':<7} {'backend':<8} {'median ms':>10} {'speedup':>8}")
    for name, n, h, w, c, k, s in SHAPES:
        xp = rng.normal(size=(n, h, w, c)).astype(args.dtype)
        cols = {b: im2col(xp, k, s) for b, (im2col, _) in found.items()}
        ref = cols["python"]
        for b, out in cols.items():
            if not np.array_equal(out, ref):
                raise SystemExit(f"{b} im2col differs from numpy on {name}")
        for kernel in ("im2col", "col2im"):
            base = None
            for b, (i2c, c2i) in found.items():
                if kernel == "im2col":
                    t = median_time(lambda: i2c(xp, k, s), args.repeat)
                else:
                    t = median_time(lambda: c2i(ref, h, w, s), args.repeat)
                base = t if b == "python" else base
                speed = f"{base / t:7.2f}x" if base else ""
                print(f"{name:<14} {kernel:<7} {b:<8} {1e3 * t:10.3f} {speed:>8}")
        for b, (_, c2i) in found.items():
            if not np.array_equal(c2i(ref, h, w, s), found["python"][1](ref, h, w, s)):
                raise SystemExit(f"{b} col2im differs from numpy on {name}")


if __name__ == "__main__":
    main()
