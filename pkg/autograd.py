"""
Tape-based reverse-mode automatic differentiation over float64 tensors.

Every differentiable op builds a ``Node`` holding its value and, for each
parent, a vector-Jacobian product closure.  ``backward`` orders the graph
topologically and replays it in reverse, accumulating ``grad`` on every
node that requires it.
"""
import logging

import numpy as np

from tensor import (
    ACTIVATIONS, NumericalError, ShapeError, activation, as_tensor,
    check_finite, conv2d_same, conv2d_same_grads,
)


class Node:
    """A value in the expression graph."""

    def __init__(self, value, parents=(), requires_grad=False, op="leaf", name=None):
        self.value = value
        self.parents = list(parents)   # [(Node, vjp(grad_out) -> grad_parent)]
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.grad = None
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def item(self):
        if self.value.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.value.shape}",
                             axis=0, expected=1, actual=self.value.size)
        return float(self.value.reshape(()))

    def numpy(self):
        return np.array(self.value, copy=True)

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, requires_grad=True, name=None):
    """A trainable (or frozen) graph input."""
    return Node(as_tensor(value, name or "leaf"), requires_grad=requires_grad, name=name)


def constant(value):
    return Node(np.asarray(value, dtype=np.float64), requires_grad=False, op="const")


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value + b.value,
                [(a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(g, b.shape))], op="add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value - b.value,
                [(a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: -_unbroadcast(g, b.shape))], op="sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value * b.value,
                [(a, lambda g: _unbroadcast(g * b.value, a.shape)),
                 (b, lambda g: _unbroadcast(g * a.value, b.shape))], op="mul")


def matmul(a, w):
    """``(..., n) @ (n, m)`` with a 2-D right operand."""
    a, w = as_node(a), as_node(w)
    if w.value.ndim != 2 or a.value.shape[-1] != w.value.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {w.shape}",
                         axis=-1, expected=w.value.shape[0], actual=a.value.shape[-1])

    def _dw(g):
        return a.value.reshape(-1, a.value.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    return Node(a.value @ w.value,
                [(a, lambda g: g @ w.value.T), (w, _dw)], op="matmul")


def conv2d(x, kernels, bias=None):
    """Differentiable ``conv2d_same``."""
    x, kernels = as_node(x), as_node(kernels)
    memo = {}

    def _grads(g):
        # x and kernel vjps share one pass per upstream gradient
        if memo.get("g") is not g:
            memo["g"] = g
            memo["grads"] = conv2d_same_grads(x.value, kernels.value, g)
        return memo["grads"]

    parents = [(x, lambda g: _grads(g)[0]), (kernels, lambda g: _grads(g)[1])]
    if bias is not None:
        bias = as_node(bias)
        parents.append((bias, lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0)))
    value = conv2d_same(x.value, kernels.value, None if bias is None else bias.value)
    return Node(value, parents, op="conv2d")


def apply_activation(x, kind):
    x = as_node(x)
    y = activation(x.value, kind)
    if kind == "linear":
        return Node(y, [(x, lambda g: g)], op="linear")
    _, derivative = ACTIVATIONS[kind]
    return Node(y, [(x, lambda g: g * derivative(y))], op=kind)


def sigmoid(x):
    return apply_activation(x, "sigmoid")


def tanh(x):
    return apply_activation(x, "tanh")


def square(x):
    x = as_node(x)
    return Node(x.value * x.value, [(x, lambda g: 2.0 * x.value * g)], op="square")


def total(x):
    """Sum of all elements, as a scalar node."""
    x = as_node(x)
    return Node(np.asarray(x.value.sum()), [(x, lambda g: np.broadcast_to(g, x.shape).copy())],
                op="sum")


def tilted(residual, tau):
    """Elementwise pinball loss max(tau*r, (tau-1)*r) with slope tau at r == 0.

    ``tau`` is a scalar or broadcasts against ``residual`` (one level per
    trailing channel).
    """
    r = as_node(residual)
    tau = np.asarray(tau, dtype=np.float64)
    value = np.maximum(tau * r.value, (tau - 1.0) * r.value)
    slope = np.where(r.value >= 0.0, tau, tau - 1.0)
    return Node(value, [(r, lambda g: g * slope)], op="tilted")


def reshape(x, shape):
    x = as_node(x)
    return Node(x.value.reshape(shape), [(x, lambda g: g.reshape(x.shape))], op="reshape")


def take(x, index, axis=-1):
    """Select one index along ``axis`` (the axis is dropped)."""
    x = as_node(x)

    def _vjp(g):
        out = np.zeros_like(x.value)
        idx = [slice(None)] * x.value.ndim
        idx[axis] = index
        out[tuple(idx)] = g
        return out

    return Node(np.take(x.value, index, axis=axis), [(x, _vjp)], op="take")


def narrow(x, lo, hi):
    """Channels ``lo:hi`` of the last axis."""
    x = as_node(x)

    def _vjp(g):
        out = np.zeros_like(x.value)
        out[..., lo:hi] = g
        return out

    return Node(x.value[..., lo:hi], [(x, _vjp)], op="narrow")


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    parents = []
    for i, n in enumerate(nodes):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        parents.append((n, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return Node(np.concatenate([n.value for n in nodes], axis=axis), parents, op="concat")


def stack(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    parents = [(n, lambda g, i=i: np.take(g, i, axis=axis)) for i, n in enumerate(nodes)]
    return Node(np.stack([n.value for n in nodes], axis=axis), parents, op="stack")


def _topological_order(root):
    """Iterative DFS post-order over nodes that require grad."""
    order, state = [], {}
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            state[id(node)] = 2
            order.append(node)
            continue
        mark = state.get(id(node))
        if mark == 2:
            continue
        assert mark != 1, f"cycle detected in expression graph at {node!r}"
        state[id(node)] = 1
        stack_.append((node, True))
        for parent, _ in node.parents:
            if parent.requires_grad and state.get(id(parent)) != 2:
                stack_.append((parent, False))
    return order


def backward(loss):
    """Reverse-mode sweep from a scalar ``loss``.

    Resets every accumulator in the graph to zero first, so repeated calls on
    fresh graphs are independent. Returns ``{leaf: grad}`` for all leaves
    with ``requires_grad``.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}",
                         axis=0, expected=1, actual=loss.value.size)
    check_finite(loss.value, "loss")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        for parent, vjp in node.parents:
            if parent.requires_grad:
                parent.grad = parent.grad + vjp(node.grad)
    grads = {node: node.grad for node in order if node.is_leaf}
    for g in grads.values():
        check_finite(g, "gradient")
    return grads


def grad_check(f, params, eps=1e-5):
    """Compare analytic gradients against central differences.

    ``f`` is a zero-argument callable rebuilding the scalar expression from
    the current values of ``params`` (leaf nodes).  Returns
    max |analytic - numeric| / max(1, |numeric|) over every parameter entry.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    loss = f()
    grads = backward(loss)
    analytic = [np.array(grads.get(p, np.zeros_like(p.value))) for p in params]

    def _evaluate():
        value = f().item()
        if not np.isfinite(value):
            raise NumericalError("grad_check evaluation produced a non-finite value")
        return value

    worst = 0.0
    for p, a in zip(params, analytic):
        base = np.array(p.value, copy=True)
        for idx in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[idx] = base[idx] + eps
            p.value = shifted
            f_plus = _evaluate()
            shifted = base.copy()
            shifted[idx] = base[idx] - eps
            p.value = shifted
            f_minus = _evaluate()
            p.value = base
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, abs(a[idx] - numeric) / max(1.0, abs(numeric)))
    logging.debug(f"grad_check over {len(params)} parameter(s): max rel error {worst:.3e}")
    return worst
