"""Tensor values and the reverse-mode tape."""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_SEQ = itertools.count()


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Node:
    """One executed op: its inputs and the vector-Jacobian product closure."""

    __slots__ = ("seq", "name", "parents", "vjp")

    def __init__(self, name: str, parents: Sequence["Tensor"], vjp: Callable):
        self.seq = next(_SEQ)
        self.name = name
        self.parents = tuple(parents)
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.name}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        backward(self, grad)

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf. ``grad`` is always allocated, zero-initialized."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def freeze(self):
        self.trainable = False
        self.requires_grad = False

    def __repr__(self):
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, trainable={self.trainable})"


def make_result(name: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op output, recording a tape node when any parent needs grad.

    ``vjp(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(name, parents, vjp)
    return out


class Tape:
    """Ops reachable from a root, in reverse execution order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node is None or id(t.node) in seen:
                continue
            seen.add(id(t.node))
            nodes.append(t.node)
            stack.extend(t.node.parents)
        nodes.sort(key=lambda n: n.seq, reverse=True)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(root: Tensor, grad=None, tape: Tape | None = None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if not root.requires_grad:
        raise RuntimeError("backward() called on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise RuntimeError("grad must be given for non-scalar roots")
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.dtype)
    if root.node is None:
        _accumulate_leaf(root, grad)
        return
    tape = tape if tape is not None else Tape.from_root(root)
    # pending output gradients, keyed by the node that produced the tensor
    grads = {id(root.node): grad}
    for node in tape:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                _accumulate_leaf(p, pg)
            else:
                key = id(p.node)
                grads[key] = grads[key] + pg if key in grads else pg


def _accumulate_leaf(t: Tensor, g):
    if t.grad is None or t.grad.shape != t.data.shape:
        t.grad = np.array(g, dtype=t.dtype)
    else:
        t.grad += g
