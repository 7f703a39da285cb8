"""Pure numpy versions of the compiled kernels.

Summation orders match ``_ckernels.pyx`` exactly.
"""
import numpy as np


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, k, k) -> (n, c, k, k, ho, wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if cols.shape != (n, c * k * k, ho * wo):
        raise ValueError("col2im: column buffer does not match target shape")
    cols = cols.reshape(n, c, k, k, ho, wo)
    hp, wp = h + 2 * pad, w + 2 * pad
    # room for windows that hang past the padded border (non-divisible strides)
    out = np.zeros((n, c, max(hp, (ho - 1) * stride + k), max(wp, (wo - 1) * stride + k)), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w])


def resample_last(x, idx, wts):
    acc = x[:, idx[:, 0]] * wts[:, 0]
    acc = acc + x[:, idx[:, 1]] * wts[:, 1]
    acc = acc + x[:, idx[:, 2]] * wts[:, 2]
    acc = acc + x[:, idx[:, 3]] * wts[:, 3]
    return acc
