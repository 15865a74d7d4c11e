"""Minimal reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps a float64 array and remembers how it was produced; calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates exact gradients into every ``requires_grad`` leaf.  Only the
operations the tracking model needs are provided.  Heavy elementwise steps
(layernorm, softmax, relu, hinge) route through :mod:`turntrack.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar tensor")
        order = []
        seen = set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _bwd(out: Tensor, pairs):
    """Attach a backward closure distributing out.grad to (tensor, fn) pairs."""

    def run(g):
        for t, fn in pairs:
            if t.requires_grad:
                t._accumulate(fn(g))

    out._backward = run
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, parents=(a, b))
    return _bwd(out, [
        (a, lambda g: g @ b.data.swapaxes(-1, -2)),
        (b, lambda g: a.data.swapaxes(-1, -2) @ g),
    ])


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be a 1-d bias broadcast over leading axes."""
    out = Tensor(a.data + b.data, parents=(a, b))

    def db(g):
        if b.data.shape == g.shape:
            return g
        extra = g.ndim - b.data.ndim
        return g.sum(axis=tuple(range(extra)))

    return _bwd(out, [(a, lambda g: g), (b, db)])


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, parents=(a,))
    return _bwd(out, [(a, lambda g: g * s)])


def add_scalar_tensors(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))
    return _bwd(out, [(a, lambda g: g), (b, lambda g: g)])


def relu(a: Tensor) -> Tensor:
    out = Tensor(kernels.relu_fwd(a.data), parents=(a,))
    return _bwd(out, [(a, lambda g: kernels.relu_bwd(a.data, g))])


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))
    return _bwd(out, [(a, lambda g: g.reshape(a.data.shape))])


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), parents=(a,))
    return _bwd(out, [(a, lambda g: g.transpose(inverse))])


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop], parents=(a,))

    def da(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return full

    return _bwd(out, [(a, da)])


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis (any leading shape)."""
    flat = a.data.reshape(-1, a.data.shape[-1])
    y = kernels.softmax_fwd(np.ascontiguousarray(flat))
    out = Tensor(y.reshape(a.data.shape), parents=(a,))

    def da(g):
        gflat = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        return kernels.softmax_bwd(y, gflat).reshape(a.data.shape)

    return _bwd(out, [(a, da)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    y, mean, rstd = kernels.layernorm_fwd(x.data, gain.data, bias.data, eps)
    out = Tensor(y, parents=(x, gain, bias))
    cache = {}

    def full(g):
        if "grads" not in cache:
            cache["grads"] = kernels.layernorm_bwd(x.data, gain.data, mean, rstd, g)
        return cache["grads"]

    return _bwd(out, [
        (x, lambda g: full(g)[0]),
        (gain, lambda g: full(g)[1]),
        (bias, lambda g: full(g)[2]),
    ])


def hinge_masked_sum(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum of max(0, 1 - x*y) over entries where mask is nonzero.

    Rows are flattened to 2-d for the kernel, so any leading shape works.
    """
    width = logits.data.shape[-1]
    flat = np.ascontiguousarray(logits.data.reshape(-1, width))
    labels2 = np.ascontiguousarray(
        np.asarray(labels, dtype=np.float64).reshape(-1, width))
    mask2 = np.ascontiguousarray(
        np.asarray(mask, dtype=np.float64).reshape(-1, width))
    total, active = kernels.hinge_fwd(flat, labels2, mask2)
    out = Tensor(total, parents=(logits,))
    return _bwd(out, [(logits, lambda g: kernels.hinge_bwd(
        active, labels2, float(g)).reshape(logits.data.shape))])
