"""Minimal reverse-mode differentiation over fp64 numpy arrays.

Each op records its parents and a closure that pushes the output gradient
back to them. Ops are coarse (a whole matmul, a whole selective scan) so the
graph stays small even for long sequences.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_DTYPE = np.float64


class GraphConsumedError(RuntimeError):
    pass


@contextmanager
def precision(dtype):
    """Temporarily build tensors in another float type (used by the gradient oracle)."""
    global _DTYPE
    old, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        The graph is released afterwards; a second call raises
        :class:`GraphConsumedError`.
        """
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward pass")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.accumulate(g)
                continue
            node._backward(g, grads)
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _send(grads: dict, node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node._backward is None:
        node.accumulate(g)
        return
    if g.shape != node.data.shape:
        g = unbroadcast(g, node.data.shape)
    prev = grads.get(id(node))
    grads[id(node)] = g if prev is None else prev + g


def make(data: np.ndarray, parents: Sequence[Tensor],
         backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result; ``backward(g)`` returns one gradient per parent."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g, grads):
            for p, gp in zip(parents, backward(g)):
                if gp is not None:
                    _send(grads, p, gp)

        out._backward = _bw
    return out


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return make(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    return make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return make(a.data * m, (a,), lambda g: (g * m,))


# ----------------------------------------------------------------------------
# reductions, shapes


def sum_all(a: Tensor) -> Tensor:
    return make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return make(a.data[idx], (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[idx]`` along axis 0 with scatter-add backward (embedding lookup, gather)."""
    idx = np.asarray(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return make(a.data[idx], (a,), bw)


def pick(a: Tensor, labels: np.ndarray) -> Tensor:
    """``a[i, labels[i]]`` for a 2-D tensor."""
    rows = np.arange(len(labels))
    labels = np.asarray(labels)

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, labels] = g
        return (full,)
    return make(a.data[rows, labels], (a,), bw)


# ----------------------------------------------------------------------------
# linear algebra


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-stable ``x @ w`` for 2-D ``w``.

    Every call goes through one 2-D gemm with at least two rows, so the value
    of a row never depends on how many other rows share the call (a lone row
    would otherwise take BLAS's gemv path and differ in the last bits).
    """
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    if x2.shape[0] == 1:
        y = np.concatenate([x2, np.zeros_like(x2)]) @ w
        y = y[:1]
    else:
        y = x2 @ w
    return y.reshape(lead + (w.shape[-1],))


def matmul(a, w) -> Tensor:
    """``a @ w`` with ``a`` of shape (..., k) and ``w`` of shape (k, n)."""
    a, w = as_tensor(a), as_tensor(w)
    if w.ndim != 2:
        raise ValueError("matmul weight must be 2-D")

    def bw(g):
        ga = _mm(g, w.data.T) if a.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw
    return make(_mm(a.data, w.data), (a, w), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ----------------------------------------------------------------------------
# normalization and probabilities


def rmsnorm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * r

    def bw(g):
        gx = gs = None
        if x.requires_grad:
            dxhat = g * scale.data
            gx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        if scale.requires_grad:
            gs = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        return gx, gs
    return make(xhat * scale.data, (x, scale), bw)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return make(p, (x,), lambda g: (p * (g - np.sum(g * p, axis=-1, keepdims=True)),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or rate <= 0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


# ----------------------------------------------------------------------------
# sequence ops


def causal_depthwise_conv(u: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution over axis -2.

    ``u``: (..., L, C); ``kernel``: (C, W) with ``kernel[:, W-1]`` applied to
    the current step; ``bias``: (C,). Positions before the start are zero.
    """
    L = u.shape[-2]
    W = kernel.shape[-1]
    pad = [(0, 0)] * u.ndim
    pad[-2] = (W - 1, 0)
    up = np.pad(u.data, pad)
    y = np.zeros_like(u.data) + bias.data
    for j in range(W):
        y = y + up[..., j:j + L, :] * kernel.data[:, j]

    def bw(g):
        gu = gk = gb = None
        if u.requires_grad:
            gp = np.zeros_like(up)
            for j in range(W):
                gp[..., j:j + L, :] += g * kernel.data[:, j]
            gu = gp[..., W - 1:, :]
        if kernel.requires_grad:
            g2 = g.reshape(-1, L, g.shape[-1])
            up2 = up.reshape(-1, up.shape[-2], up.shape[-1])
            gk = np.stack([np.einsum("blc,blc->c", g2, up2[:, j:j + L, :]) for j in range(W)], axis=-1)
        if bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gu, gk, gb
    return make(y, (u, kernel, bias), bw)
