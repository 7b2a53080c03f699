"""Small reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray plus the list of (parent, vjp) pairs that
produced it. ``backward`` walks the graph in reverse topological order and
accumulates vector-Jacobian products into every tensor created with ``leaf``.
Constants created with ``const`` never receive gradients and subgraphs that
contain no leaves are pruned at construction time.

Only the operations the encoder and the two adapter parameterizations need
are implemented; all of them follow numpy broadcasting, with gradients summed
back to the original operand shapes.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "parents", "needs_grad", "grad")

    def __init__(self, value, parents=(), needs_grad: bool = False):
        self.value = value
        self.parents = parents
        self.needs_grad = needs_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


def leaf(value) -> Tensor:
    """A trainable tensor; ``backward`` leaves its gradient in ``.grad``."""
    return Tensor(np.asarray(value, dtype=np.float64), (), True)


def const(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), (), False)


def _node(value, parents) -> Tensor:
    needs = any(p.needs_grad for p, _ in parents)
    return Tensor(value, tuple(parents) if needs else (), needs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.value + b.value,
        [
            (a, lambda g, sa=a.value.shape: _unbroadcast(g, sa)),
            (b, lambda g, sb=b.value.shape: _unbroadcast(g, sb)),
        ],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.value - b.value,
        [
            (a, lambda g, sa=a.value.shape: _unbroadcast(g, sa)),
            (b, lambda g, sb=b.value.shape: _unbroadcast(-g, sb)),
        ],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.value * b.value,
        [
            (a, lambda g, bv=b.value, sa=a.value.shape: _unbroadcast(g * bv, sa)),
            (b, lambda g, av=a.value, sb=b.value.shape: _unbroadcast(g * av, sb)),
        ],
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.value * c, [(a, lambda g: g * c)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def da(g, bv=b.value, sa=a.value.shape):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa)

    def db(g, av=a.value, sb=b.value.shape):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, sb)

    return _node(a.value @ b.value, [(a, da), (b, db)])


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.value.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), [(a, lambda g: np.transpose(g, inverse))])


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes (matrix transpose for stacked matrices)."""
    axes = tuple(range(a.value.ndim - 2)) + (a.value.ndim - 1, a.value.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.value.shape
    return _node(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.value.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.value.shape[ax] for ax in axis]))
    else:
        count = a.value.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _node(
        a.value ** p,
        [(a, lambda g, av=a.value: g * (p * av ** (p - 1.0)))],
    )


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _node(t, [(a, lambda g: g * (1.0 - t * t))])


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, [(a, lambda g: (g - (g * y).sum(axis=-1, keepdims=True)) * y)])


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(.))) over the last axis; gradient is the softmax."""
    m = a.value.max(axis=-1)
    lse = m + np.log(np.exp(a.value - m[..., None]).sum(axis=-1))
    soft = np.exp(a.value - lse[..., None])
    return _node(lse, [(a, lambda g: g[..., None] * soft)])


def backward(root: Tensor) -> None:
    """Accumulate gradients of ``root`` (summed over its entries) into leaves."""
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.needs_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        g = node.grad
        for parent, vjp in node.parents:
            if not parent.needs_grad:
                continue
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
