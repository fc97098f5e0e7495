"""A small reverse-mode gradient engine over numpy arrays.

Every ``Node`` carries its value, an op tag and the saved context needed by
the op's backward rule.  Backward rules live in ``BACKWARD_RULES`` keyed by
the op tag, which lets other modules register their own ops (the spectral
penalty does) and lets tests swap a rule out for fault injection.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

BACKWARD_RULES: dict[str, Callable] = {}

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LAYER_NORM_EPS = 1e-5


class Node:
    __slots__ = ("value", "grad", "parents", "op", "ctx", "requires_grad")

    def __init__(self, value, parents=(), op="leaf", ctx=None, requires_grad=False):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.ctx = ctx
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, requires_grad=True) -> Node:
    return Node(value, requires_grad=requires_grad)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def register_backward(op: str):
    def deco(fn):
        BACKWARD_RULES[op] = fn
        return fn
    return deco


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# forward ops

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Node(out, (a, b), "add")


@register_backward("add")
def _add_backward(node, g):
    a, b = node.parents
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Node(out, (a, b), "sub")


@register_backward("sub")
def _sub_backward(node, g):
    a, b = node.parents
    return unbroadcast(g, a.shape), -unbroadcast(g, b.shape)


def mul(a, b) -> Node:
    """Elementwise product with broadcasting."""
    a, b = as_node(a), as_node(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Node(out, (a, b), "mul")


@register_backward("mul")
def _mul_backward(node, g):
    a, b = node.parents
    return unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)


def scale(a, c: float) -> Node:
    a = as_node(a)
    return Node(a.value * c, (a,), "scale", c)


@register_backward("scale")
def _scale_backward(node, g):
    return (g * node.ctx,)


def matmul(a, b) -> Node:
    """Batched matrix product following ``np.matmul`` broadcasting."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return Node(np.matmul(a.value, b.value), (a, b), "matmul")


@register_backward("matmul")
def _matmul_backward(node, g):
    a, b = node.parents
    ga = np.matmul(g, np.swapaxes(b.value, -1, -2)) if a.requires_grad else None
    gb = np.matmul(np.swapaxes(a.value, -1, -2), g) if b.requires_grad else None
    return (
        None if ga is None else unbroadcast(ga, a.shape),
        None if gb is None else unbroadcast(gb, b.shape),
    )


def transpose(a) -> Node:
    """Swap the last two axes."""
    a = as_node(a)
    return Node(np.swapaxes(a.value, -1, -2), (a,), "transpose")


@register_backward("transpose")
def _transpose_backward(node, g):
    return (np.swapaxes(g, -1, -2),)


def permute(a, axes) -> Node:
    a = as_node(a)
    axes = tuple(axes)
    return Node(np.transpose(a.value, axes), (a,), "permute", axes)


@register_backward("permute")
def _permute_backward(node, g):
    return (np.transpose(g, np.argsort(node.ctx)),)


def reshape(a, shape) -> Node:
    a = as_node(a)
    return Node(a.value.reshape(shape), (a,), "reshape", a.shape)


@register_backward("reshape")
def _reshape_backward(node, g):
    return (g.reshape(node.ctx),)


def sum(a) -> Node:  # noqa: A001 - mirrors numpy naming
    a = as_node(a)
    return Node(np.sum(a.value), (a,), "sum")


@register_backward("sum")
def _sum_backward(node, g):
    a = node.parents[0]
    return (np.broadcast_to(g, a.shape).copy(),)


def row_softmax(a) -> Node:
    """Softmax along the last axis, computed with the row max subtracted."""
    a = as_node(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return Node(s, (a,), "row_softmax")


@register_backward("row_softmax")
def _softmax_backward(node, g):
    s = node.value
    return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Node:
    """LayerNorm over the last axis, followed by an affine gain/bias."""
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return Node(xhat * gain.value + bias.value, (x, gain, bias), "layer_norm", (xhat, inv))


@register_backward("layer_norm")
def _layer_norm_backward(node, g):
    x, gain, bias = node.parents
    xhat, inv = node.ctx
    gx_hat = g * gain.value
    n = xhat.shape[-1]
    gx = inv / n * (
        n * gx_hat
        - gx_hat.sum(axis=-1, keepdims=True)
        - xhat * np.sum(gx_hat * xhat, axis=-1, keepdims=True)
    )
    return gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)


def gelu(x) -> Node:
    """GELU in its exact form ``x * Phi(x)``."""
    x = as_node(x)
    cdf = 0.5 * (1.0 + erf(x.value / _SQRT2))
    return Node(x.value * cdf, (x,), "gelu", cdf)


@register_backward("gelu")
def _gelu_backward(node, g):
    x = node.parents[0].value
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (node.ctx + x * pdf),)


def mean_pool(x, axis: int = -2) -> Node:
    """Mean over the token axis."""
    x = as_node(x)
    axis = axis % x.ndim
    return Node(x.value.mean(axis=axis), (x,), "mean_pool", axis)


@register_backward("mean_pool")
def _mean_pool_backward(node, g):
    x = node.parents[0]
    axis = node.ctx
    return (np.broadcast_to(np.expand_dims(g, axis) / x.shape[axis], x.shape).copy(),)


def cross_entropy(logits, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``logits`` is ``(classes,)`` with a scalar label, or ``(batch, classes)``.
    """
    logits = as_node(logits)
    z = logits.value
    single = z.ndim == 1
    if single:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integers")
    classes = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"label out of range [0, {classes})")
    zs = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(logsum - zs[rows, labels])
    probs = np.exp(zs - logsum[:, None])
    return Node(loss, (logits,), "cross_entropy", (probs, labels, single))


@register_backward("cross_entropy")
def _cross_entropy_backward(node, g):
    probs, labels, single = node.ctx
    d = probs.copy()
    d[np.arange(d.shape[0]), labels] -= 1.0
    d *= g / d.shape[0]
    return (d[0] if single else d,)


# ---------------------------------------------------------------------------
# backward pass

def _topological(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Populate ``.grad`` on every ancestor of the scalar ``root``."""
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    root.grad = np.ones_like(root.value)
    for node in reversed(_topological(root)):
        if node.grad is None or not node.parents:
            continue
        grads = BACKWARD_RULES[node.op](node, node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            g = np.asarray(g)
            if g.shape != p.shape:
                raise ShapeError(f"backward rule {node.op!r} produced grad {g.shape} for parent {p.shape}")
            p.grad = g if p.grad is None else p.grad + g


def grad_of(f: Callable[[Node], Node], x) -> np.ndarray:
    """Gradient of scalar ``f`` at the array ``x``."""
    xn = leaf(np.array(x, dtype=np.float64))
    out = f(xn)
    backward(out)
    return np.zeros_like(xn.value) if xn.grad is None else xn.grad


def finite_diff_check(f: Callable[[Node], Node], x, h: float = 1e-5, floor: float = 1e-8,
                      normwise: bool = False) -> float:
    """Relative error of backward() against central differences.

    By default this is the max entrywise error with ``max(|g|, floor)`` as
    denominator, where ``g`` is the backward() gradient.  ``normwise`` gives
    ``||fd - g|| / max(||g||, floor)`` instead, which is the meaningful figure
    for large compositions whose gradients have many near-zero entries.
    """
    if not 1e-8 < h < 1e-3:
        raise ContractError("h must lie in (1e-8, 1e-3)")
    x = np.array(x, dtype=np.float64)
    g = grad_of(f, x)
    fd = np.empty_like(x)
    flat = x.reshape(-1)
    fd_flat = fd.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(Node(x)).value)
        flat[k] = orig - h
        fm = float(f(Node(x)).value)
        flat[k] = orig
        fd_flat[k] = (fp - fm) / (2.0 * h)
    if normwise:
        return float(np.linalg.norm(fd - g) / max(float(np.linalg.norm(g)), floor))
    err = np.abs(fd - g) / np.maximum(np.abs(g), floor)
    return float(err.max()) if err.size else 0.0
