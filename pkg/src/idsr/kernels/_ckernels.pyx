# cython: language_level=3
"""Compiled inner loops: patch extraction, patch scatter-add, bicubic axis pass.

Loop orders mirror the numpy fallback so both backends produce
bit-identical results.
"""
import numpy as np

cimport cython
from cython cimport floating


cdef inline Py_ssize_t _first_valid(Py_ssize_t off, Py_ssize_t stride) nogil:
    # smallest ow with ow*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _last_valid(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t w, Py_ssize_t wo) nogil:
    # one past the largest ow with ow*stride + off < w, capped at wo
    cdef Py_ssize_t hi
    if w - off <= 0:
        return 0
    hi = (w - off - 1) // stride + 1
    return hi if hi < wo else wo


def im2col(const floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((n, c * k * k, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, oh, ow, row, ih, ow_lo, ow_hi
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ci * k + i) * k + j
                        ow_lo = _first_valid(j - pad, stride)
                        ow_hi = _last_valid(j - pad, stride, w, wo)
                        for oh in range(ho):
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(ow_lo, ow_hi):
                                out[b, row, oh * wo + ow] = x[b, ci, ih, ow * stride + j - pad]
    return out_arr


def col2im(const floating[:, :, ::1] cols, tuple shape, int k, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    if cols.shape[0] != n or cols.shape[1] != c * k * k or cols.shape[2] != ho * wo:
        raise ValueError("col2im: column buffer does not match target shape")
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, oh, ow, row, ih, ow_lo, ow_hi
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ci * k + i) * k + j
                        ow_lo = _first_valid(j - pad, stride)
                        ow_hi = _last_valid(j - pad, stride, w, wo)
                        for oh in range(ho):
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(ow_lo, ow_hi):
                                out[b, ci, ih, ow * stride + j - pad] += cols[b, row, oh * wo + ow]
    return out_arr


def resample_last(const double[:, ::1] x, const long[:, ::1] idx, const double[:, ::1] wts):
    """Apply 4-tap filters along the last axis of a 2-D array."""
    cdef Py_ssize_t m = x.shape[0], lout = idx.shape[0]
    out_arr = np.empty((m, lout), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, o
    cdef double acc
    with nogil:
        for r in range(m):
            for o in range(lout):
                acc = x[r, idx[o, 0]] * wts[o, 0]
                acc = acc + x[r, idx[o, 1]] * wts[o, 1]
                acc = acc + x[r, idx[o, 2]] * wts[o, 2]
                acc = acc + x[r, idx[o, 3]] * wts[o, 3]
                out[r, o] = acc
    return out_arr
