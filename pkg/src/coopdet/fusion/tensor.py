"""A minimal reverse-mode tape over numpy arrays.

Each op is a :class:`Function` with a hand-derived ``backward``.  Graph
nodes are only recorded when some input requires a gradient, so inference
passes pay no bookkeeping cost.  ``backward`` is looked up on the class at
call time, which is what the mutation tests in :mod:`coopdet.gradcheck` hook.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

REGISTRY: dict[str, type["Function"]] = {}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_fn", "_ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._fn: Optional[type[Function]] = None
        self._ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            in_grads = node._fn.backward(node._ctx, g)
            for p, pg in zip(node._parents, in_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    name = ""

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        if cls.name:
            REGISTRY[cls.name] = cls

    @staticmethod
    def forward(*arrays, **kw):  # pragma: no cover - interface
        raise NotImplementedError

    @staticmethod
    def backward(ctx, g):  # pragma: no cover - interface
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kw) -> Tensor:
        tensors = [None if x is None else as_tensor(x) for x in inputs]
        arrays = [None if t is None else t.data for t in tensors]
        out, ctx = cls.forward(*arrays, **kw)
        res = Tensor(out)
        if any(t is not None and t.requires_grad for t in tensors):
            res.requires_grad = True
            res._parents = tuple(t if t is not None else Tensor(0.0) for t in tensors)
            res._fn = cls
            res._ctx = ctx
        return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Add(Function):
    name = "add"

    @staticmethod
    def forward(a, b):
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(a, b):
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Linear(Function):
    """``y = x @ W.T + b`` with ``W`` of shape (out, in) and ``b`` of (1, out)."""

    name = "linear"

    @staticmethod
    def forward(x, W, b=None):
        y = x @ W.T
        if b is not None:
            y = y + b
        return y, (x, W, b is not None)

    @staticmethod
    def backward(ctx, g):
        x, W, has_b = ctx
        dx = g @ W
        dW = g.T @ x
        db = g.sum(axis=0, keepdims=True) if has_b else None
        return dx, dW, db


class Tanh(Function):
    name = "tanh"

    @staticmethod
    def forward(x):
        y = np.tanh(x)
        return y, y

    @staticmethod
    def backward(y, g):
        return (g * (1.0 - y * y),)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(x):
        y = _sigmoid(x)
        return y, y

    @staticmethod
    def backward(y, g):
        return (g * y * (1.0 - y),)


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(x):
        y = np.exp(x)
        return y, y

    @staticmethod
    def backward(y, g):
        return (g * y,)


class LayerNorm(Function):
    """Row-wise normalization to zero mean and unit (eps-regularized) variance."""

    name = "layer_norm"

    @staticmethod
    def forward(x, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
        return y, (y, inv)

    @staticmethod
    def backward(ctx, g):
        y, inv = ctx
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)


class Attention(Function):
    """``softmax(Q K^T / sqrt(d)) V`` with the softmax taken over keys."""

    name = "attention"

    @staticmethod
    def forward(Q, K, V):
        if K.shape[0] == 0:
            raise ValueError("attention needs at least one key")
        d = Q.shape[-1]
        scale = 1.0 / math.sqrt(d)
        s = (Q @ K.T) * scale
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        return w @ V, (Q, K, V, w, scale)

    @staticmethod
    def backward(ctx, g):
        Q, K, V, w, scale = ctx
        dV = w.T @ g
        dw = g @ V.T
        ds = w * (dw - (dw * w).sum(axis=1, keepdims=True))
        dQ = (ds @ K) * scale
        dK = (ds.T @ Q) * scale
        return dQ, dK, dV


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(*xs, axis=0):
        sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis), (sizes, axis)

    @staticmethod
    def backward(ctx, g):
        sizes, axis = ctx
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))


class Rows(Function):
    """Gather rows ``x[idx]``; backward scatter-adds."""

    name = "rows"

    @staticmethod
    def forward(x, idx=None):
        idx = np.asarray(idx, dtype=np.int64)
        return x[idx], (x.shape, idx)

    @staticmethod
    def backward(ctx, g):
        shape, idx = ctx
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)


class Scatter(Function):
    """Place the rows of ``x`` at ``idx`` in a zero matrix with ``n`` rows."""

    name = "scatter"

    @staticmethod
    def forward(x, idx=None, n=0):
        idx = np.asarray(idx, dtype=np.int64)
        out = np.zeros((n,) + x.shape[1:])
        out[idx] = x
        return out, idx

    @staticmethod
    def backward(idx, g):
        return (g[idx],)


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(x):
        return np.asarray(x.sum()), x.shape

    @staticmethod
    def backward(shape, g):
        return (np.broadcast_to(g, shape).copy(),)


class FocalLoss(Function):
    """Summed sigmoid focal loss computed from logits.

    Per element: ``-a (1-p)^g log p`` for positives and
    ``-(1-a) p^g log(1-p)`` for negatives, with ``p = sigmoid(logit)``.
    """

    name = "focal"

    @staticmethod
    def forward(z, y=None, alpha=0.25, gamma=2.0):
        y = np.asarray(y, dtype=float).reshape(z.shape)
        p = _sigmoid(z)
        log_p = -np.logaddexp(0.0, -z)
        log_q = -np.logaddexp(0.0, z)
        pos = -alpha * (1.0 - p) ** gamma * log_p
        neg = -(1.0 - alpha) * p ** gamma * log_q
        loss = np.where(y > 0.5, pos, neg)
        return np.asarray(loss.sum()), (z, y, p, log_p, log_q, alpha, gamma)

    @staticmethod
    def backward(ctx, g):
        z, y, p, log_p, log_q, alpha, gamma = ctx
        q = 1.0 - p
        # d/dz of each branch, using dp/dz = p q
        d_pos = -alpha * (-gamma * q ** gamma * p * log_p + q ** gamma * q)
        if gamma == 0.0:
            d_neg = (1.0 - alpha) * p
        else:
            d_neg = -(1.0 - alpha) * (gamma * p ** gamma * q * log_q - p ** gamma * p)
        d = np.where(y > 0.5, d_pos, d_neg)
        return (g * d,)


class SmoothL1(Function):
    """Weighted sum of smooth-L1 residual penalties."""

    name = "smooth_l1"

    @staticmethod
    def forward(pred, target=None, weight=None, beta=1.0):
        r = pred - target
        a = np.abs(r)
        small = a < beta
        loss = np.where(small, 0.5 * r * r / beta, a - 0.5 * beta)
        w = np.ones_like(r) if weight is None else np.broadcast_to(weight, r.shape)
        return np.asarray((loss * w).sum()), (r, small, w, beta)

    @staticmethod
    def backward(ctx, g):
        r, small, w, beta = ctx
        d = np.where(small, r / beta, np.sign(r))
        return (g * d * w,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


# thin functional wrappers


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def linear(x, W, b=None) -> Tensor:
    return Linear.apply(x, W, b)


def tanh(x) -> Tensor:
    return Tanh.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def exp(x) -> Tensor:
    return Exp.apply(x)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, eps=eps)


def attention(Q, K, V) -> Tensor:
    return Attention.apply(Q, K, V)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = list(xs)
    if len(xs) == 1:
        return as_tensor(xs[0])
    return Concat.apply(*xs, axis=axis)


def rows(x, idx) -> Tensor:
    return Rows.apply(x, idx=idx)


def scatter(x, idx, n: int) -> Tensor:
    return Scatter.apply(x, idx=idx, n=n)


def tsum(x) -> Tensor:
    return Sum.apply(x)


def focal_loss_logits(z, y, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    return FocalLoss.apply(z, y=y, alpha=alpha, gamma=gamma)


def smooth_l1_loss(pred, target, weight=None, beta: float = 1.0) -> Tensor:
    return SmoothL1.apply(pred, target=np.asarray(target, dtype=float),
                          weight=None if weight is None else np.asarray(weight, dtype=float),
                          beta=beta)


Op = Callable[..., Tensor]
