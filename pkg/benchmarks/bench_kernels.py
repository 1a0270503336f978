"""Time the numba and numpy kernel backends on desk-scale tensors.

    python benchmarks/bench_kernels.py [--size 32] [--batch 4] [--channels 8] [--repeat 5]

Both backends must produce identical results; the script checks that before
reporting timings.
"""
import argparse
import json
import time

import numpy as np

from wmtract import autograd as ag
from wmtract import kernels


def best_of(fn, repeat):
    fn()  # warm-up (includes numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size, batch, ch):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, ch, size, size, size)).astype(np.float32)
    w = (rng.standard_normal((ch, ch, 3, 3, 3)) * 0.1).astype(np.float32)
    b = np.zeros(ch, np.float32)
    dy = rng.standard_normal(x.shape).astype(np.float32)
    k, s = 3, 1
    xpad = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1))).transpose(0, 2, 3, 4, 1))
    cols = np.empty((batch, size, size, size, k**3 * ch), np.float32)
    _, arg = kernels.maxpool2(x)
    pooled_dy = dy[:, :, ::2, ::2, ::2].copy()
    return {
        "im2col": lambda: kernels.im2col(xpad, cols, 0, k, s),
        "col2im": lambda: kernels.col2im(cols, np.zeros_like(xpad), 0, k, s),
        "maxpool": lambda: kernels.maxpool2(x),
        "maxpool_backward": lambda: kernels.maxpool2_backward(pooled_dy, arg, x.shape),
        "conv3d_forward": lambda: ag.conv3d(x, w, b),
        "conv3d_backward": lambda: ag.conv3d_backward(dy, x, w),
    }


def check_same(size, batch, ch):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((batch, ch, size, size, size)).astype(np.float32)
    w = (rng.standard_normal((ch, ch, 3, 3, 3)) * 0.1).astype(np.float32)
    dy = rng.standard_normal(x.shape).astype(np.float32)
    out = {}
    for name in ("numba", "numpy"):
        kernels.set_backend(name)
        out[name] = (ag.conv3d(x, w), *ag.conv3d_backward(dy, x, w), *kernels.maxpool2(x))
    return all(np.array_equal(a, b) for a, b in zip(out["numba"], out["numpy"]))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write timings to this file")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    same = check_same(min(args.size, 12), 2, 3)
    print(f"backends agree bitwise: {same}")
    results = {}
    for name in ("numba", "numpy"):
        kernels.set_backend(name)
        for op, fn in cases(args.size, args.batch, args.channels).items():
            results.setdefault(op, {})[name] = best_of(fn, args.repeat)
    print(f"\n{'kernel':18s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}")
    for op, t in results.items():
        print(f"{op:18s} {t['numba']:10.4f} {t['numpy']:10.4f} {t['numpy'] / t['numba']:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"args": vars(args), "agree": same, "seconds": results}, fh, indent=2)


if __name__ == "__main__":
    main()
