"""Bicubic resampling and multi-scale low-resolution degradation."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import kernels

CUBIC_A = -0.5


@dataclass(frozen=True, order=True)
class DegradationSpec:
    target_h: int
    target_w: int

    def __post_init__(self):
        if self.target_h < 1 or self.target_w < 1:
            raise ValueError(f"resolution must be positive, got {self.target_h}x{self.target_w}")

    @classmethod
    def parse(cls, text: str) -> "DegradationSpec":
        """Parse ``"HxW"`` (height first, e.g. ``"11x8"``)."""
        try:
            h, w = text.lower().strip().split("x")
            return cls(int(h), int(w))
        except ValueError as exc:
            raise ValueError(f"bad resolution {text!r}; expected HxW") from exc

    def __str__(self):
        return f"{self.target_h}x{self.target_w}"


# Training resolutions, all drawn with equal probability.
CANONICAL_RESOLUTIONS = tuple(
    DegradationSpec(h, w)
    for h, w in [(7, 6), (11, 8), (14, 12), (16, 12), (16, 14), (16, 16), (18, 16), (21, 15), (32, 32), (112, 96)]
)
# Probe resolutions of the controlled (AR-style) identification protocol.
AR_PROBE_RESOLUTIONS = tuple(DegradationSpec(h, w) for h, w in [(11, 8), (16, 12), (16, 16), (21, 15), (32, 32)])
NETWORK_SIZE = (128, 128)


def cubic_weight(x):
    """Keys cubic convolution kernel with ``a = -0.5``."""
    a = CUBIC_A
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@functools.lru_cache(maxsize=256)
def bicubic_taps(in_size: int, out_size: int):
    """Source indices and weights, each ``(out_size, 4)``, for one axis.

    Half-pixel centers; out-of-range taps are clamped to the edge.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError(f"sizes must be positive, got {in_size} -> {out_size}")
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(src)
    t = src - base
    offsets = np.arange(-1, 3)
    idx = base[:, None].astype(np.int64) + offsets[None, :]
    wts = cubic_weight(t[:, None] - offsets[None, :])
    idx = np.clip(idx, 0, in_size - 1)
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


@functools.lru_cache(maxsize=256)
def bicubic_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Dense ``(out_size, in_size)`` interpolation matrix for one axis."""
    idx, wts = bicubic_taps(in_size, out_size)
    m = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), 4)
    np.add.at(m, (rows, idx.ravel()), wts.ravel())
    m.setflags(write=False)
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the two trailing axes of ``img`` with bicubic interpolation.

    Works for ``(H, W)``, ``(C, H, W)`` and ``(N, C, H, W)`` arrays. The
    result is clamped to ``[0, 1]`` and keeps the input dtype.
    """
    img = np.asarray(img)
    if img.ndim < 2:
        raise ValueError("bicubic_resize needs at least 2 dimensions")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("source image is empty")
    lead = img.shape[:-2]
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32
    x = img.reshape(-1, h, w).astype(np.float64)
    m = x.shape[0]
    idx, wts = bicubic_taps(w, out_w)
    x = kernels.resample_last(x.reshape(m * h, w), idx, wts).reshape(m, h, out_w)
    idx, wts = bicubic_taps(h, out_h)
    x = x.transpose(0, 2, 1).reshape(m * out_w, h)
    x = kernels.resample_last(x, idx, wts).reshape(m, out_w, out_h).transpose(0, 2, 1)
    np.clip(x, 0.0, 1.0, out=x)
    return np.ascontiguousarray(x.reshape(*lead, out_h, out_w), dtype=dtype)


def degrade(img: np.ndarray, spec: DegradationSpec, return_lr: bool = False, size=NETWORK_SIZE):
    """Downsample a 128x128 image to ``spec`` and bicubic-upsample it back.

    With ``return_lr`` the intermediate low-resolution image is returned
    as a second value.
    """
    img = np.asarray(img)
    if tuple(img.shape[-2:]) != tuple(size):
        raise ValueError(f"degrade expects {size[0]}x{size[1]} input, got {img.shape[-2]}x{img.shape[-1]}")
    lr = bicubic_resize(img, spec.target_h, spec.target_w)
    up = bicubic_resize(lr, size[0], size[1])
    return (up, lr) if return_lr else up


def sample_resolution(rng: np.random.Generator, resolutions=CANONICAL_RESOLUTIONS) -> DegradationSpec:
    """Draw one resolution uniformly from ``resolutions``."""
    return resolutions[int(rng.integers(len(resolutions)))]
