"""Dense numeric kernels with a small reverse-mode autodiff tape.

All arrays are float64. Matrix products and softmax normalisers accumulate
strictly left to right (``np.cumsum``) so that inserting an exactly-zero term
never changes a result bit. Attention-mask isolation relies on this.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

NEG_INF = float("-inf")
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class DegenerateSliceError(ValueError):
    """Raised when every entry of a softmax slice is blocked."""


class OracleError(RuntimeError):
    pass


class AdditiveMask:
    """Attention mask holding 0 (allowed) or ``NEG_INF`` (blocked) entries."""

    def __init__(self, allowed: np.ndarray):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {allowed.shape}")
        if not allowed.any(axis=1).all():
            raise DegenerateSliceError("mask has a row with no allowed entry")
        self.allowed = allowed

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape

    @property
    def entries(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, NEG_INF)

    def __repr__(self) -> str:
        return f"AdditiveMask(shape={self.shape}, allowed={int(self.allowed.sum())})"


# ---------------------------------------------------------------------------
# raw kernels on ndarrays


def _seq_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Left-to-right sum along ``axis`` (keeps dims)."""
    if x.shape[axis] == 0:
        return x.sum(axis=axis, keepdims=True)
    acc = np.cumsum(x, axis=axis)
    return np.take(acc, [-1], axis=axis)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deterministic 2-D matrix product."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if k == 0:
        return np.zeros((m, n))
    prod = a[:, :, None] * b[None, :, :]
    return np.cumsum(prod, axis=1)[:, -1, :]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# autodiff tensor


class Tensor:
    """float64 array with an optional gradient tape.

    The graph is only recorded when some input has ``requires_grad``; pure
    inference therefore runs without bookkeeping.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    __array_priority__ = 100

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
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (_unbroadcast(g / bd, sa), _unbroadcast(-g * ad / (bd * bd), sb)))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    """2-D product with fixed accumulation order."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(_dot(ad, bd), (a, b), lambda g: (_dot(g, bd.T), _dot(ad.T, g)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _make(a.data[start:stop], (a,), back)


def take_rows(a, index: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def pick(a, index: tuple) -> Tensor:
    """Scalar or sub-array selection with basic/advanced numpy indexing."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), back)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(a.data.sum(axis=axis), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def log_floor(a, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); the floor keeps probabilities of exactly 0 finite."""
    a = as_tensor(a)
    x = a.data
    clipped = np.maximum(x, floor)
    return _make(np.log(clipped), (a,), lambda g: (np.where(x > floor, g / clipped, 0.0),))


def bce_with_logits(logits, target: np.ndarray) -> Tensor:
    """Elementwise stable binary cross-entropy of sigmoid(logits) against target."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(target, dtype=np.float64)
    if x.shape != t.shape:
        raise ShapeError(f"logits {x.shape} and target {t.shape} differ")
    loss = np.logaddexp(0.0, x) - t * x
    return _make(loss, (logits,), lambda g: (g * (expit(x) - t),))


def softmax(x, axis: int = -1, mask: AdditiveMask | np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction; ``NEG_INF`` entries map to exactly 0."""
    x = as_tensor(x)
    xd = x.data
    blocked = xd == NEG_INF
    if mask is not None:
        entries = mask.entries if isinstance(mask, AdditiveMask) else np.asarray(mask)
        blocked = blocked | np.broadcast_to(entries == NEG_INF, xd.shape)
    if blocked.all(axis=axis).any():
        raise DegenerateSliceError("softmax slice has every entry blocked")
    if not np.isfinite(np.where(blocked, 0.0, xd)).all():
        raise ValueError("softmax input contains non-finite values")
    live = np.where(blocked, NEG_INF, xd)
    m = np.max(live, axis=axis, keepdims=True)
    e = np.where(blocked, 0.0, np.exp(np.where(blocked, 0.0, xd - m)))
    p = e / _seq_sum(e, axis)

    def back(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, (x,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: feature size {c} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), back)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def attention(q, k, v, mask: AdditiveMask | np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(C) + mask) v for a single head."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} disagree")
    if mask is not None:
        mshape = mask.shape if isinstance(mask, AdditiveMask) else np.shape(mask)
        if tuple(mshape) != (q.shape[0], k.shape[0]):
            raise ShapeError(f"mask shape {tuple(mshape)} != {(q.shape[0], k.shape[0])}")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax(scores, axis=-1, mask=mask), v)


def multi_head_attention(q, k, v, heads: int = 1, mask=None) -> Tensor:
    """Split the channel axis into ``heads`` equal groups and attend per group."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if heads == 1:
        return attention(q, k, v, mask)
    c = q.shape[1]
    if c % heads:
        raise ShapeError(f"{c} channels not divisible into {heads} heads")
    d = c // heads
    outs = []
    for h in range(heads):
        sl = (slice(None), slice(h * d, (h + 1) * d))
        outs.append(attention(pick(q, sl), pick(k, sl), pick(v, sl), mask))
    return concat(outs, axis=1)


def ffn(x, w1, b1, w2, b2) -> Tensor:
    """Per-token feed-forward block: gelu(x W1 + b1) W2 + b2."""
    x = as_tensor(x)
    w1, w2 = as_tensor(w1), as_tensor(w2)
    if w1.shape[0] != x.shape[-1] or w2.shape[0] != w1.shape[1] or np.shape(b1)[-1] != w1.shape[1]:
        raise ShapeError(f"ffn shapes x{x.shape} W1{w1.shape} W2{w2.shape} disagree")
    if np.shape(b2)[-1] != w2.shape[1]:
        raise ShapeError(f"ffn bias b2 {np.shape(b2)} vs W2 {w2.shape}")
    flat = reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
    out = linear(gelu(linear(flat, w1, b1)), w2, b2)
    return reshape(out, x.shape[:-1] + (w2.shape[1],)) if x.data.ndim != 2 else out


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    With ``coords`` only those flat coordinates are probed and a 1-D array in
    the same order is returned.
    """
    p = np.array(params, dtype=np.float64)
    flat = p.reshape(-1)
    idx = range(flat.size) if coords is None else list(coords)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(p))
        flat[i] = orig - eps
        lo = float(f(p))
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise OracleError(f"non-finite function value probing coordinate {i}")
        out[n] = (hi - lo) / (2.0 * eps)
    return out.reshape(p.shape) if coords is None else out
