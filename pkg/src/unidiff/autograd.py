"""A small tape-free reverse-mode differentiation engine on numpy arrays.

Each :class:`Tensor` records its parents and a closure mapping the output
gradient to parent gradients. :func:`backward` walks the graph in reverse
topological order. Leaves created with ``requires_grad=True`` are
parameters; their ``version`` is bumped on every in-place update so a graph
recorded before an update refuses to backpropagate afterwards.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import StaleGraphError


class Tensor:
    __slots__ = ("data", "grad", "parents", "grad_fn", "requires_grad", "version", "_seen", "name")

    def __init__(self, data, parents=(), grad_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.version = 0
        self._seen = tuple(p.version for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def assign(self, value):
        """In-place parameter update; invalidates graphs built on the old value."""
        self.data[...] = value
        self.version += 1

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, neg(_lift(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def param(data, name=None) -> Tensor:
    data = np.array(data)
    if data.dtype.kind != "f":
        data = data.astype(np.float64)
    return Tensor(data, requires_grad=True, name=name)


def const(data) -> Tensor:
    return Tensor(np.asarray(data))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return Tensor(a.data + b, (a,), lambda g: (g,))
    a, b = _lift(a), _lift(b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        # python scalars stay weakly typed so float32 graphs remain float32
        return Tensor(a.data * b, (a,), lambda g: (g * b,))
    a, b = _lift(a), _lift(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2 and a.data.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, (a, b), grad_fn)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, key) -> Tensor:
    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return Tensor(a.data[key], (a,), grad_fn)


def embed(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx)

    def grad_fn(g):
        out = np.zeros_like(table.data)
        flat = g.reshape(-1, table.shape[-1])
        np.add.at(out, idx.reshape(-1), flat)
        return (out,)

    return Tensor(table.data[idx], (table,), grad_fn)


def take(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather distinct indices along ``axis`` (each index at most once)."""
    idx = np.asarray(idx)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = idx
        out[tuple(sl)] = g
        return (out,)

    return Tensor(np.take(a.data, idx, axis=axis), (a,), grad_fn)


def concat(parts, axis: int) -> Tensor:
    parts = [_lift(p) for p in parts]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Tensor(np.concatenate([p.data for p in parts], axis=axis), parts,
                  lambda g: tuple(np.split(g, bounds, axis=axis)))


def scatter(parts, index_sets, length: int, axis: int) -> Tensor:
    """Inverse of gathering: place ``parts[i]`` at ``index_sets[i]`` along ``axis``."""
    parts = [_lift(p) for p in parts]
    shape = list(parts[0].shape)
    shape[axis] = length
    out = np.zeros(shape, dtype=parts[0].data.dtype)
    for p, idx in zip(parts, index_sets):
        sl = [slice(None)] * out.ndim
        sl[axis] = idx
        out[tuple(sl)] = p.data

    def grad_fn(g):
        return tuple(np.take(g, idx, axis=axis) for idx in index_sets)

    return Tensor(out, parts, grad_fn)


def softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return Tensor(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor(y, (a,), lambda g: (g * y,))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """``log(max(a, floor))``; no gradient flows through clamped entries."""
    x = a.data
    live = x > floor
    y = np.log(np.where(live, x, floor if floor > 0 else 1.0))
    if floor <= 0:
        y = np.where(live, y, -np.inf)
    return Tensor(y, (a,), lambda g: (np.where(live, g / np.where(live, x, 1.0), 0.0),))


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data
    return Tensor(y, (a,), lambda g: (-g * y * y,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor(y, (a,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def grad_fn(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return Tensor(y, (x, gain, bias), grad_fn)


def _toposort(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every parameter leaf."""
    order = _toposort(root)
    for node in order:
        if any(p.version != v for p, v in zip(node.parents, node._seen)):
            raise StaleGraphError("a parameter changed after this graph was recorded")
    grads = {id(root): np.ones_like(root.data) if seed is None else np.asarray(seed)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.grad_fn(g)):
            if not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
