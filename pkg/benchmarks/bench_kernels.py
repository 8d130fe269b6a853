"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from odseg import backend


def cases(rng):
    x = rng.standard_normal((8, 34, 34, 34)).astype(np.float32)
    out = (32, 32, 32)
    cols = rng.standard_normal((8 * 27, 32 ** 3)).astype(np.float32)
    mask = (rng.random((48, 48, 48)) < 0.3).astype(np.uint8)
    xs = rng.standard_normal((2, 6, 6, 6))
    ws = rng.standard_normal((2, 2, 3, 3, 3))
    bs = np.zeros(2)
    return {
        "im2col3d 8x34^3 k3": lambda b: b.im2col3d(x, 3, 1, *out),
        "col2im3d 8x34^3 k3": lambda b: b.col2im3d(cols, 8, 34, 34, 34, 3, 1, *out),
        "label26 48^3 p=0.3": lambda b: b.label26(mask),
        "conv3d_naive 2x6^3": lambda b: b.conv3d_naive(xs, ws, bs, 1, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    names = backend.available()
    impls = {n: backend.get(n) for n in names}
    print(f"{'kernel':<24}" + "".join(f"{n:>12}" for n in names) + "     speedup")
    for label, fn in cases(np.random.default_rng(0)).items():
        times = {n: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
                 for n, b in impls.items()}
        row = f"{label:<24}" + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in names)
        if len(names) > 1:
            row += f"  {times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
