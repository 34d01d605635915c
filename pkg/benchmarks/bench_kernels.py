"""Numba vs numpy timings for the convolution and pooling kernels.

Usage: python benchmarks/bench_kernels.py [--repeat 20]

Shapes mirror the segmentation network's hot path (batch of 4 clips x 8
frames at 32x32).  The first numba call is excluded from timing (JIT).
"""

import argparse
import time

import numpy as np

from egoexo import kernels
from egoexo.tensor import conv_out_size


def _time(fn, repeat):
    fn()  # warm-up / compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases():
    rng = np.random.default_rng(0)
    for b, c, h, k, s in [(32, 32, 16, 3, 1), (32, 64, 8, 3, 1), (32, 3, 32, 3, 2), (32, 96, 4, 3, 1)]:
        xp = rng.standard_normal((b, c, h + 2, h + 2)).astype(np.float32)
        ho = conv_out_size(h, k, s, 1)
        cols = rng.standard_normal((b * ho * ho, c * k * k)).astype(np.float32)
        yield f"im2col  B={b} C={c} H={h} k={k} s={s}", \
            lambda u, xp=xp, k=k, s=s, ho=ho: kernels.im2col(xp, k, k, s, ho, ho, use_numba=u)
        yield f"col2im  B={b} C={c} H={h} k={k} s={s}", \
            lambda u, cols=cols, shape=xp.shape, k=k, s=s, ho=ho: kernels.col2im(cols, shape, k, k, s, ho, ho,
                                                                                 use_numba=u)
    x = rng.standard_normal((32, 64, 16, 16)).astype(np.float32)
    yield "maxpool B=32 C=64 H=16 k=2", lambda u: kernels.maxpool(x, 2, 2, 8, 8, use_numba=u)
    _, idx = kernels.maxpool(x, 2, 2, 8, 8, use_numba=False)
    g = rng.standard_normal((32, 64, 8, 8)).astype(np.float32)
    yield "maxpool_backward", lambda u: kernels.maxpool_backward(g, idx, x.shape, 2, 2, use_numba=u)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba not importable; only the numpy path can run")
        return
    print(f"{'kernel':<36}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for name, fn in cases():
        a, b = fn(False), fn(True)
        same = all(np.array_equal(p, q) for p, q in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        tn = _time(lambda: fn(False), args.repeat) * 1e3
        tb = _time(lambda: fn(True), args.repeat) * 1e3
        print(f"{name:<36}{tn:>10.3f}{tb:>10.3f}{tn / tb:>8.2f}x  {same}")


if __name__ == "__main__":
    main()
