"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints per-kernel median wall time for each backend, checks the two agree
bit-for-bit, and times a toy generator forward+backward under each.
"""
import argparse
import statistics
import timeit

import numpy as np

from idsr import kernels
from idsr.ipunet import build
from idsr.tensorcore import mse, Tensor


def _median_ms(fn, repeat):
    return statistics.median(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def kernel_cases():
    rng = np.random.default_rng(0)
    x = rng.random((4, 32, 64, 64)).astype(np.float32)
    ho = (64 + 2 - 4) // 2 + 1
    cols = rng.random((4, 32 * 16, ho * ho)).astype(np.float32)
    taps_x = rng.random((384, 128))
    idx = rng.integers(0, 128, (64, 4))
    wts = rng.random((64, 4))
    return {
        "im2col 4x32x64x64 k4 s2": lambda be: be.im2col(x, 4, 2, 1),
        "col2im 4x32x64x64 k4 s2": lambda be: be.col2im(cols, x.shape, 4, 2, 1),
        "resample_last 384x128 -> 64": lambda be: be.resample_last(taps_x, idx, wts),
    }


def train_step_ms(repeat):
    net = build(channel_schedule=(8, 16, 32, 32, 32, 32, 32))
    x = np.random.default_rng(1).random((4, 3, 128, 128)).astype(np.float32)

    def step():
        loss = mse(net(x), Tensor(x))
        loss.backward()
        net.zero_grad()

    return _median_ms(step, repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (active: {kernels.BACKEND})")
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is timed")

    rows = []
    for name, fn in kernel_cases().items():
        times = {}
        outs = {}
        for be_name in backends:
            be = kernels.get_backend(be_name)
            outs[be_name] = fn(be)
            times[be_name] = _median_ms(lambda: fn(be), args.repeat)
        same = all(np.array_equal(outs[backends[0]], o) for o in outs.values())
        rows.append((name, times, same))

    step_times = {}
    saved = kernels._impl
    try:
        for be_name in backends:
            kernels._impl = kernels.get_backend(be_name)
            step_times[be_name] = train_step_ms(max(3, args.repeat // 4))
    finally:
        kernels._impl = saved
    rows.append(("toy net fwd+bwd, batch 4", step_times, True))

    width = max(len(r[0]) for r in rows)
    header = f"{'case':<{width}}  " + "  ".join(f"{b:>10}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}  identical"
    print(header)
    for name, times, same in rows:
        line = f"{name:<{width}}  " + "  ".join(f"{times[b]:>8.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f"  {times['python'] / times['cython']:>7.2f}x  {same}"
        print(line)


if __name__ == "__main__":
    main()
