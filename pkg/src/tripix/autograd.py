"""Minimal reverse-mode autodiff over numpy arrays.

The op set is deliberately small and closed: everything the training loop
needs is composed from the primitives below, so the finite-difference test
matrix in the test suite covers the whole surface. Nodes are immutable after
construction; ``backward`` never mutates the graph, so repeated calls yield
identical gradient maps.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, ShapeError, col2im, im2col, softmax_raw


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "rule", "requires_grad", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: Sequence["Node"] = (),
        rule: Optional[Callable] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value = value
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # rule(grad_out) -> per-parent gradients; dropped if nothing upstream needs it
        self.rule = rule if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self), mul(self, -1.0))

    def __repr__(self):
        tag = self.name or ("param" if not self.parents and self.requires_grad else "node")
        return f"Node({tag}, shape={self.value.shape})"


def _to_array(x, like: Optional[np.ndarray] = None) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return arr


def constant(x, name: Optional[str] = None) -> Node:
    return Node(_to_array(x), name=name)


def parameter(x, name: Optional[str] = None) -> Node:
    return Node(_to_array(x), requires_grad=True, name=name)


def _lift(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return constant(_to_array(x, like.value))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Node, b) -> Node:
    a = a if isinstance(a, Node) else _lift(a, b)
    b = _lift(b, a)
    out = a.value + b.value

    def rule(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Node(out, (a, b), rule)


def mul(a: Node, b) -> Node:
    a = a if isinstance(a, Node) else _lift(a, b)
    b = _lift(b, a)
    out = a.value * b.value

    def rule(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Node(out, (a, b), rule)


def relu(x: Node) -> Node:
    mask = x.value > 0  # derivative at 0 defined as 0
    return Node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def log(x: Node) -> Node:
    return Node(np.log(x.value), (x,), lambda g: (g / x.value,))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    out = a.value @ b.value

    def rule(g):
        return g @ b.value.T, a.value.T @ g

    return Node(out, (a, b), rule)


def transpose(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ShapeError("transpose expects a 2-d operand")
    return Node(np.ascontiguousarray(x.value.T), (x,), lambda g: (g.T,))


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    old = x.value.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(a: Node, b: Node, axis: int) -> Node:
    ax = axis % a.value.ndim
    na = a.value.shape[ax]
    out = np.concatenate([a.value, b.value], axis=ax)

    def rule(g):
        ga, gb = np.split(g, [na], axis=ax)
        return ga, gb

    return Node(out, (a, b), rule)


def slice_(x: Node, key) -> Node:
    out = x.value[key]

    def rule(g):
        gx = np.zeros_like(x.value)
        gx[key] = g
        return (gx,)

    return Node(np.ascontiguousarray(out), (x,), rule)


def sum_(x: Node, axis=None, keepdims: bool = False) -> Node:
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return Node(np.asarray(out), (x,), rule)


def softmax(x: Node, axis: int) -> Node:
    y = softmax_raw(x.value, axis)

    def rule(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Node(y, (x,), rule)


def conv2d(x: Node, kernel: Node, bias: Optional[Node], stride: int, padding: int) -> Node:
    c_out, c_in, k, _ = kernel.value.shape
    if x.value.shape[0] != c_in:
        raise ShapeError(
            f"conv input has {x.value.shape[0]} channels, kernel expects {c_in}"
        )
    h_out = (x.value.shape[1] + 2 * padding - k) // stride + 1
    w_out = (x.value.shape[2] + 2 * padding - k) // stride + 1
    cols = im2col(x.value, k, stride, padding)
    kmat = kernel.value.reshape(c_out, c_in * k * k)
    out = (kmat @ cols).reshape(c_out, h_out, w_out)
    parents = [x, kernel]
    if bias is not None:
        out = out + bias.value[:, None, None]
        parents.append(bias)

    def rule(g):
        gmat = g.reshape(c_out, h_out * w_out)
        gx = col2im(kmat.T @ gmat, x.value.shape, k, stride, padding)
        gk = (gmat @ cols.T).reshape(kernel.value.shape)
        if bias is not None:
            return gx, gk, g.sum(axis=(1, 2))
        return gx, gk

    return Node(out, parents, rule)


def ste_select(hard, soft: Node) -> Node:
    """Forward the hard selection, route gradients straight through to the soft one."""
    hard = _to_array(hard, soft.value)
    if hard.shape != soft.value.shape:
        raise ShapeError(
            f"hard shape {hard.shape} does not match soft shape {soft.value.shape}"
        )
    return Node(hard, (soft,), lambda g: (g,))


def backward(loss: Node) -> dict:
    """Accumulate d(loss)/d(node) for every requires-grad node reachable from loss.

    Returns a fresh {Node: ndarray} map; the graph itself is left untouched.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad:
                stack.append((p, False))

    grads: dict = {loss: np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.get(node)
        if g is None or node.rule is None:
            continue
        parent_grads = node.rule(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    return grads
