"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports cleanly, unless the
environment variable ``IDSR_KERNELS=python`` forces the fallback.
"""
import os

import numpy as np

from . import _npkernels

BACKEND = "python"
_impl = _npkernels

if os.environ.get("IDSR_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels

        _impl = _ckernels
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    if name == "python":
        return _npkernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def im2col(x, k, stride, pad):
    """Unfold ``(N, C, H, W)`` into ``(N, C*k*k, Ho*Wo)`` patch columns."""
    return _impl.im2col(np.ascontiguousarray(x), int(k), int(stride), int(pad))


def col2im(cols, shape, k, stride, pad):
    """Scatter-add patch columns back into an ``(N, C, H, W)`` image (adjoint of im2col)."""
    return _impl.col2im(np.ascontiguousarray(cols), tuple(int(s) for s in shape), int(k), int(stride), int(pad))


def resample_last(x, idx, wts):
    """Four-tap filtering along the last axis of a float64 2-D array."""
    return _impl.resample_last(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(idx, dtype=np.int64),
        np.ascontiguousarray(wts, dtype=np.float64),
    )
