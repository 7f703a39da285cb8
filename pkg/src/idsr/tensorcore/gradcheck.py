"""Finite-difference verification of backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, backward, precision


@dataclass
class GradcheckReport:
    max_rel_error: list
    tolerance: float
    nonfinite: bool = False
    message: str = ""
    names: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and all(e < self.tolerance for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error) if self.max_rel_error else 0.0

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{n}={e:.2e}" for n, e in zip(self.names, self.max_rel_error))
        extra = f" ({self.message})" if self.message else ""
        return f"{status} max_rel_err[{parts}] tol={self.tolerance:g}{extra}"


def gradcheck(fn, inputs, tolerance=1e-4, names=None, seed=0, skip=None) -> GradcheckReport:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` maps Tensors to a Tensor; the checked scalar is the output
    contracted with a fixed random weighting (which keeps gradients
    generic - a plain sum makes e.g. batch-norm input grads vanish).
    ``inputs`` are float arrays, promoted to 64-bit. ``skip(i, x)``
    may return a boolean mask of entries to exclude (kinks).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    names = names or [f"input{i}" for i in range(len(arrays))]
    with precision(np.float64):
        try:
            leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
            out = fn(*leaves)
            weights = np.random.default_rng(seed).standard_normal(out.shape)

            def scalar_of(arrs):
                y = fn(*[Tensor(a) for a in arrs]).data
                return float((y * weights).sum())

            if not np.all(np.isfinite(out.data)):
                return GradcheckReport([], tolerance, True, "non-finite forward output", names)
            backward(out, weights)
            errors = []
            for i, a in enumerate(arrays):
                analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
                if not np.all(np.isfinite(analytic)):
                    return GradcheckReport(errors, tolerance, True, f"non-finite gradient for {names[i]}", names)
                mask = skip(i, a) if skip is not None else None
                worst = 0.0
                for j in range(a.size):
                    if mask is not None and mask.flat[j]:
                        continue
                    x0 = a.flat[j]
                    h = 1e-5 * max(1.0, abs(x0))
                    a.flat[j] = x0 + h
                    fp = scalar_of(arrays)
                    a.flat[j] = x0 - h
                    fm = scalar_of(arrays)
                    a.flat[j] = x0
                    num = (fp - fm) / (2 * h)
                    if not np.isfinite(num):
                        return GradcheckReport(errors, tolerance, True, f"non-finite difference for {names[i]}", names)
                    ana = analytic.flat[j]
                    rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                    worst = max(worst, rel)
                errors.append(worst)
        except FloatingPointError as exc:
            return GradcheckReport([], tolerance, True, str(exc), names)
    return GradcheckReport(errors, tolerance, False, "", names)


def kink_mask(threshold=1e-3):
    """Skip-mask factory excluding inputs within ``threshold`` of zero."""
    return lambda i, a: np.abs(a) < threshold


def scale_grad(x: Tensor, factor: float) -> Tensor:
    """Identity forward whose backward is multiplied by ``factor``.

    Exists to build deliberately wrong backward passes for mutation tests.
    """
    from .tensor import make_result

    return make_result("scale_grad", x.data.copy(), (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# Registered cases: each returns (fn, inputs, names, skip) for a seeded rng.

def _conv_case(rng, n, cin, cout, h, k, stride, pad):
    x = rng.standard_normal((n, cin, h, h))
    w = rng.standard_normal((cout, cin, k, k)) * 0.3
    b = rng.standard_normal(cout)
    return (lambda x, w, b: ops.conv2d(x, w, b, stride, pad)), [x, w, b], ["input", "weight", "bias"], None


def _convt_case(rng, n, cin, cout, h, k, stride, pad):
    x = rng.standard_normal((n, cin, h, h))
    w = rng.standard_normal((cin, cout, k, k)) * 0.3
    b = rng.standard_normal(cout)
    return (lambda x, w, b: ops.conv_transpose2d(x, w, b, stride, pad)), [x, w, b], ["input", "weight", "bias"], None


def _bn_case(rng, shape, training):
    c = shape[1]
    x = rng.standard_normal(shape) * 2 + 0.5
    g = rng.standard_normal(c) + 1.0
    b = rng.standard_normal(c)
    rm = rng.standard_normal(c) * 0.1
    rv = rng.random(c) + 0.5

    def fn(x, g, b):
        return ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training)

    return fn, [x, g, b], ["input", "gamma", "beta"], None


def _kinked(rng, shape, f):
    x = rng.standard_normal(shape)
    return f, [x], ["input"], kink_mask()


def _l2n_case(rng, shape):
    x = rng.standard_normal(shape) + 0.1
    return (lambda v: ops.l2_normalize(v)), [x], ["input"], None


def _resize_case(rng, shape, oh, ow):
    x = rng.uniform(0.3, 0.7, shape)
    return (lambda v: ops.resize(v, oh, ow)), [x], ["input"], None


GRADCHECK_CASES = {
    "conv2d": [
        lambda r: _conv_case(r, 2, 3, 4, 8, 4, 2, 1),
        lambda r: _conv_case(r, 1, 2, 3, 7, 3, 1, 1),
        lambda r: _conv_case(r, 2, 1, 2, 9, 3, 2, 0),
    ],
    "conv_transpose2d": [
        lambda r: _convt_case(r, 2, 3, 2, 4, 4, 2, 1),
        lambda r: _convt_case(r, 1, 2, 3, 3, 3, 1, 1),
        lambda r: _convt_case(r, 2, 2, 1, 3, 3, 2, 0),
    ],
    "batch_norm": [
        lambda r: _bn_case(r, (4, 3, 5, 5), True),
        lambda r: _bn_case(r, (2, 2, 3, 4), True),
        lambda r: _bn_case(r, (3, 2, 2, 2), False),
    ],
    "leaky_relu": [
        lambda r: _kinked(r, (2, 3, 4, 4), lambda x: ops.leaky_relu(x, 0.2)),
        lambda r: _kinked(r, (5, 7), lambda x: ops.leaky_relu(x, 0.01)),
        lambda r: _kinked(r, (13,), lambda x: ops.leaky_relu(x, 0.5)),
    ],
    "relu": [
        lambda r: _kinked(r, (2, 3, 4, 4), ops.relu),
        lambda r: _kinked(r, (5, 7), ops.relu),
        lambda r: _kinked(r, (13,), ops.relu),
    ],
    "sigmoid": [
        lambda r: _kinked(r, (2, 3, 4, 4), ops.sigmoid)[:3] + (None,),
        lambda r: _kinked(r, (5, 7), ops.sigmoid)[:3] + (None,),
        lambda r: _kinked(r, (13,), ops.sigmoid)[:3] + (None,),
    ],
    "dropout": [
        lambda r: _kinked(r, (2, 3, 4, 4), lambda x: ops.dropout(x, 0.5, True, seed=1))[:3] + (None,),
        lambda r: _kinked(r, (5, 7), lambda x: ops.dropout(x, 0.2, True, seed=2))[:3] + (None,),
        lambda r: _kinked(r, (13,), lambda x: ops.dropout(x, 0.7, True, seed=3))[:3] + (None,),
    ],
    "concat_channels": [
        lambda r: (ops.concat_channels, [r.standard_normal((1, 2, 4, 4)), r.standard_normal((1, 3, 4, 4))], ["a", "b"], None),
        lambda r: (ops.concat_channels, [r.standard_normal((2, 1, 3, 2)), r.standard_normal((2, 1, 3, 2))], ["a", "b"], None),
        lambda r: (ops.concat_channels, [r.standard_normal((3, 4, 1, 1)), r.standard_normal((3, 2, 1, 1))], ["a", "b"], None),
    ],
    "mse": [
        lambda r: (ops.mse, [r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3, 4, 4))], ["a", "b"], None),
        lambda r: (ops.mse, [r.standard_normal((5, 7)), r.standard_normal((5, 7))], ["a", "b"], None),
        lambda r: (ops.mse, [r.standard_normal((13,)), r.standard_normal((13,))], ["a", "b"], None),
    ],
    "l2_normalize": [
        lambda r: _l2n_case(r, (4, 8)),
        lambda r: _l2n_case(r, (1, 3)),
        lambda r: _l2n_case(r, (6, 16)),
    ],
    "global_avg_pool": [
        lambda r: (ops.global_avg_pool, [r.standard_normal((2, 3, 4, 4))], ["input"], None),
        lambda r: (ops.global_avg_pool, [r.standard_normal((1, 5, 2, 3))], ["input"], None),
        lambda r: (ops.global_avg_pool, [r.standard_normal((3, 1, 1, 1))], ["input"], None),
    ],
    "linear": [
        lambda r: (ops.linear, [r.standard_normal((4, 5)), r.standard_normal((3, 5)), r.standard_normal(3)], ["x", "weight", "bias"], None),
        lambda r: (ops.linear, [r.standard_normal((1, 2)), r.standard_normal((6, 2)), r.standard_normal(6)], ["x", "weight", "bias"], None),
        lambda r: (ops.linear, [r.standard_normal((7, 3)), r.standard_normal((1, 3)), r.standard_normal(1)], ["x", "weight", "bias"], None),
    ],
    "cross_entropy": [
        lambda r: ((lambda z: ops.cross_entropy(z, [0, 2, 1, 2])), [r.standard_normal((4, 3))], ["logits"], None),
        lambda r: ((lambda z: ops.cross_entropy(z, [4])), [r.standard_normal((1, 5))], ["logits"], None),
        lambda r: ((lambda z: ops.cross_entropy(z, [1, 0, 1, 1, 0, 0])), [r.standard_normal((6, 2)) * 3], ["logits"], None),
    ],
    "resize": [
        lambda r: _resize_case(r, (1, 1, 4, 4), 8, 8),
        lambda r: _resize_case(r, (2, 1, 16, 16), 8, 8),
        lambda r: _resize_case(r, (1, 2, 7, 6), 12, 10),
    ],
    "arith": [
        lambda r: (ops.mul, [r.standard_normal((2, 3)), r.standard_normal((2, 3))], ["a", "b"], None),
        lambda r: (ops.mul, [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))], ["a", "b"], None),
        lambda r: (ops.add, [r.standard_normal((2, 3, 4)), r.standard_normal((4,))], ["a", "b"], None),
    ],
}


def run_case(name: str, index: int, tolerance=1e-4, seed=0) -> GradcheckReport:
    rng = np.random.default_rng([seed, index, len(name)])
    fn, inputs, names, skip = GRADCHECK_CASES[name][index](rng)
    return gradcheck(fn, inputs, tolerance, names=names, skip=skip)


def run_all(names=None, tolerance=1e-4, seed=0):
    """Yield ``(op_name, case_index, report)`` for every registered case."""
    for name in names or list(GRADCHECK_CASES):
        if name not in GRADCHECK_CASES:
            raise KeyError(f"no gradcheck cases registered for {name!r}")
        for i in range(len(GRADCHECK_CASES[name])):
            yield name, i, run_case(name, i, tolerance, seed)
