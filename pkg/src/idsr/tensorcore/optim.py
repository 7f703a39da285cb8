"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params, state: AdamState, t: int, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
    """Apply one Adam update at step ``t`` (1-based) and zero the gradients.

    Frozen parameters are skipped. ``clip_norm`` rescales the global
    gradient norm of the trainable parameters before the update.
    """
    if t <= 0:
        raise ValueError(f"Adam step index must be positive, got {t}")
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    scale = 1.0
    if clip_norm is not None:
        total = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.trainable))
        if total > clip_norm:
            scale = clip_norm / (total + 1e-12)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, m, v in zip(params, state.m, state.v):
        if p.trainable:
            g = p.grad if scale == 1.0 else p.grad * p.dtype.type(scale)
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        p.zero_grad()
    state.t = t


class Adam:
    def __init__(self, params: list[Parameter], lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.state = AdamState.zeros_like(self.params)

    def step(self):
        adam_step(
            self.params, self.state, self.state.t + 1, self.lr, self.beta1, self.beta2, self.eps, self.clip_norm
        )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
