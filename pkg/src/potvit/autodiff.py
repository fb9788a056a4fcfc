"""Tape-based reverse-mode autodiff over numpy arrays.

Just enough ops for a tiny pre-LN transformer: broadcast add/mul, matmul,
slicing, concat, tanh-GELU, row softmax, LayerNorm, and mean cross-entropy.
Values are float64 internally so gradient checks are not dominated by
rounding noise.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 2.0**-10  # shared with the integer LayerNorm kernel
GELU_C = np.sqrt(2.0 / np.pi)


class Var:
    __slots__ = ("value", "grad", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.value.shape


def _sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Reverse numpy broadcasting: reduce g back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a: Var, b: Var) -> Var:
    return Var(
        a.value + b.value,
        (a, b),
        (lambda g: _sum_to_shape(g, a.shape), lambda g: _sum_to_shape(g, b.shape)),
    )


def mul(a: Var, b: Var) -> Var:
    return Var(
        a.value * b.value,
        (a, b),
        (
            lambda g: _sum_to_shape(g * b.value, a.shape),
            lambda g: _sum_to_shape(g * a.value, b.shape),
        ),
    )


def scale(a: Var, c: float) -> Var:
    return Var(a.value * c, (a,), (lambda g: g * c,))


def matmul(a: Var, b: Var) -> Var:
    """Batched matmul with numpy broadcasting on leading axes."""

    def da(g):
        return _sum_to_shape(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)

    def db(g):
        return _sum_to_shape(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)

    return Var(np.matmul(a.value, b.value), (a, b), (da, db))


def transpose_last2(a: Var) -> Var:
    return Var(
        np.swapaxes(a.value, -1, -2), (a,), (lambda g: np.swapaxes(g, -1, -2),)
    )


def getitem(a: Var, idx) -> Var:
    def da(g):
        out = np.zeros_like(a.value)
        out[idx] = g
        return out

    return Var(a.value[idx], (a,), (da,))


def concat(vars_, axis: int) -> Var:
    sizes = [v.value.shape[axis] for v in vars_]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]

        return vjp

    return Var(
        np.concatenate([v.value for v in vars_], axis=axis),
        tuple(vars_),
        tuple(make_vjp(i) for i in range(len(vars_))),
    )


def broadcast_to(a: Var, shape) -> Var:
    return Var(
        np.broadcast_to(a.value, shape), (a,), (lambda g: _sum_to_shape(g, a.shape),)
    )


def gelu_tanh(a: Var) -> Var:
    x = a.value
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def da(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)

    return Var(0.5 * x * (1.0 + t), (a,), (da,))


def softmax_rows(a: Var) -> Var:
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def da(g):
        return (g - (g * s).sum(axis=-1, keepdims=True)) * s

    return Var(s, (a,), (da,))


def layernorm_rows(x: Var, gamma: Var, beta: Var, eps: float = LN_EPS) -> Var:
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    n = x.value.shape[-1]

    def dx(g):
        gh = g * gamma.value
        return inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )

    def dgamma(g):
        return _sum_to_shape(g * xhat, gamma.shape)

    def dbeta(g):
        return _sum_to_shape(g, beta.shape)

    return Var(xhat * gamma.value + beta.value, (x, gamma, beta), (dx, dgamma, dbeta))


def mean_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean CE over the batch; logits (B, C), integer labels (B,)."""
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1)) + logits.value.max(axis=-1)
    b = logits.value.shape[0]
    loss = (lse - logits.value[np.arange(b), labels]).mean()
    probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)

    def dlogits(g):
        d = probs.copy()
        d[np.arange(b), labels] -= 1.0
        return g * d / b

    return Var(loss, (logits,), (dlogits,))


def backward(out: Var) -> None:
    """Populate .grad on every node reachable from `out` (a scalar)."""
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    for node in order:
        node.grad = np.zeros_like(node.value)
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        for parent, vjp in zip(node.parents, node.vjps):
            parent.grad += vjp(node.grad)
