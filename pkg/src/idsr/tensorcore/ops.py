"""Differentiable operations with hand-written backward passes.

Every op takes and returns :class:`Tensor` and records a tape node when
any input requires grad.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor, make_result


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise / reductions ----------------------------------------------

def add(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _t(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return make_result("scale", a.data * c, (a,), lambda g: (g * c,))
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return make_result(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb))
    )


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_result(
        "mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),)
    )


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_result("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return make_result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def dropout(x: Tensor, p: float, training: bool, seed=None) -> Tensor:
    """Inverted dropout. The mask is drawn from ``np.random.default_rng(seed)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= p
    mask = (keep / (1.0 - p)).astype(x.dtype)
    return make_result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return make_result("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    val = np.asarray(np.mean(diff * diff), dtype=a.dtype)

    def vjp(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(a.dtype), (-ga).astype(b.dtype)

    return make_result("mse", val, (a, b), vjp)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row of an ``(N, D)`` tensor by ``max(||row||, eps)``."""
    x = v.data
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    live = norm > eps
    denom = np.where(live, norm, eps)
    y = x / denom

    def vjp(g):
        # projected gradient on live rows, plain scaling on clamped rows
        dot = (g * y).sum(axis=1, keepdims=True)
        return (np.where(live, (g - y * dot) / denom, g / eps).astype(v.dtype),)

    return make_result("l2_normalize", y.astype(v.dtype), (v,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = 1.0 / (h * w)
    return make_result(
        "global_avg_pool",
        out,
        (x,),
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, Din)`` and weight ``(Dout, Din)``."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        grads = [g @ wd if x.requires_grad else None, g.T @ xd if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result("linear", out, parents, vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    val = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((g / n) * p).astype(logits.dtype)

    return make_result("cross_entropy", val, (logits,), lambda g: (vjp(g),))


# -- convolution -----------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct (im2col) 2-D convolution. ``weight`` is ``(Cout, Cin, k, k)``."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cin}")
    if k != k2:
        raise ValueError("conv2d: only square kernels are supported")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d: padded input {h}x{w}+2*{padding} smaller than kernel {k}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = kernels.im2col(x.data, k, stride, padding)
    wm = weight.data.reshape(cout, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(wm.T, g2), (n, c, h, w), k, stride, padding)
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    return make_result("conv2d", out, parents, vjp)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d`. ``weight`` is ``(Cin, Cout, k, k)``."""
    if x.ndim != 4:
        raise ValueError(f"conv_transpose2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    cin, cout, k, k2 = weight.shape
    if c != cin:
        raise ValueError(f"conv_transpose2d: input has {c} channels but weight expects {cin}")
    if k != k2:
        raise ValueError("conv_transpose2d: only square kernels are supported")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d: non-positive output size")
    wm = weight.data.reshape(cin, cout * k * k)
    xf = x.data.reshape(n, cin, h * w)
    out = kernels.col2im(np.matmul(wm.T, xf), (n, cout, ho, wo), k, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gcols = kernels.im2col(g, k, stride, padding)
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(wm, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result("conv_transpose2d", out, parents, vjp)


# -- normalization ---------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over ``(N, H, W)``.

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance, exponential moving average).
    """
    n, c, h, w = x.shape
    count = n * h * w
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    if training:
        if count < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * invstd
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.ravel()
        running_var *= 1.0 - momentum
        running_var += momentum * var.ravel() * (count / (count - 1))

        def vjp(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gxhat = g * gd
                gx = (invstd / count) * (
                    count * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
                gx = gx.astype(x.dtype)
            return gx, gg, gb

    else:
        mu = running_mean.astype(x.dtype)[None, :, None, None]
        invstd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)[None, :, None, None]
        xhat = (x.data - mu) * invstd

        def vjp(g):
            return g * gd * invstd, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (xhat * gd + bd).astype(x.dtype)
    return make_result("batch_norm", out, (x, gamma, beta), vjp)


# -- resampling ------------------------------------------------------------

def resize(x: Tensor, out_h: int, out_w: int, clamp: bool = True) -> Tensor:
    """Differentiable bicubic resize of the two trailing axes of an NCHW tensor.

    Matches :func:`idsr.resample.bicubic_resize` up to float rounding;
    clamped outputs pass no gradient.
    """
    from ..resample import bicubic_matrix

    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    mh = bicubic_matrix(h, out_h).astype(x.dtype)
    mw = bicubic_matrix(w, out_w).astype(x.dtype)
    y = mh @ x.data @ mw.T
    if clamp:
        inside = (y >= 0.0) & (y <= 1.0)
        y = np.clip(y, 0.0, 1.0)
    else:
        inside = None

    def vjp(g):
        if inside is not None:
            g = g * inside
        return (mh.T @ g @ mw,)

    return make_result("resize", y.astype(x.dtype), (x,), vjp)
