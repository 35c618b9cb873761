"""Small reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Tensor` holding its value and, when gradients are
being recorded, a closure that pushes the output gradient back to its parents.
The graph is rebuilt on every forward pass; :meth:`Tensor.backward` walks it
once in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
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
                if id(p) not in seen:
                    stack.append((p, False))
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        self._accum(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                if node._parents:
                    node.grad = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value)
    if _GRAD_ENABLED:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# -- elementwise arithmetic ----------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    av, bv = a.value, b.value

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * bv, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * av, b.shape))

    return _make(av * bv, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / bv, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / bv, b.shape))

    return _make(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    av = a.value
    out = av**p

    def bw(g):
        a._accum(g * p * av ** (p - 1))

    return _make(out, (a,), bw)


# -- unary nonlinearities ---------------------------------------------------
def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def bw(g):
        a._accum(g * (1.0 - out * out))

    return _make(out, (a,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form: stable in both tails and keeps the input dtype
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.value)

    def bw(g):
        a._accum(g * out * (1.0 - out))

    return _make(out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.value)
    out = a.value * s

    def bw(g):
        a._accum(g * (s + a.value * s * (1.0 - s)))

    return _make(out, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.value)

    def bw(g):
        a._accum(g * _sigmoid_np(a.value))

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def bw(g):
        a._accum(g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    av = a.value

    def bw(g):
        a._accum(g / av)

    return _make(np.log(av), (a,), bw)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; ``b`` must be 2-D."""
    a, b = _coerce(a, b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ bv.T)
        if b.requires_grad:
            k, n = bv.shape
            b._accum(av.reshape(-1, k).T @ g.reshape(-1, n))

    return _make(av @ bv, (a, b), bw)


# -- shape manipulation ---------------------------------------------------------
def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape

    def bw(g):
        a._accum(g.reshape(src))

    return _make(a.value.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accum(g.transpose(inv))

    return _make(a.value.transpose(axes), (a,), bw)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape

    def bw(g):
        a._accum(_unbroadcast(g, src))

    return _make(np.broadcast_to(a.value, shape).copy(), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(np.concatenate([t.value for t in tensors], axis=ax), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=ax))

    return _make(np.stack([t.value for t in tensors], axis=ax), tensors, bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice / integer) indexing; the gradient is written in place."""

    def bw(g):
        a._ensure_grad()[idx] += g

    return _make(a.value[idx], (a,), bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % a.ndim
    out, lo = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(lo, lo + s)
        out.append(getitem(a, tuple(sl)))
        lo += s
    if lo != a.shape[ax]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    return out


def unbind(a: Tensor, axis: int) -> list[Tensor]:
    ax = axis % a.ndim
    pre = (slice(None),) * ax
    return [getitem(a, pre + (i,)) for i in range(a.shape[ax])]


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding lookup ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError("gather_rows index out of range")

    def bw(g):
        np.add.at(table._ensure_grad(), idx, g)

    return _make(table.value[idx], (table,), bw)


# -- reductions -----------------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, src))

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- normalisations ---------------------------------------------------------------
def l2_normalize(a: Tensor, scale: float = 1.0, floor: float = 1e-8) -> Tensor:
    """``scale * a / ||a||`` along the last axis; the norm is floored at ``floor``."""
    scale = float(scale)
    av = a.value
    norm = np.maximum(np.sqrt(np.sum(av * av, axis=-1, keepdims=True)), floor)
    unit = av / norm

    def bw(g):
        gs = g * scale
        a._accum((gs - unit * np.sum(unit * gs, axis=-1, keepdims=True)) / norm)

    return _make(unit * scale, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine)."""
    av = a.value
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        a._accum(inv * (g - gm - y * gy))

    return _make(y, (a,), bw)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    Returns the scalar loss and the probabilities (a plain array).
    """
    lv = logits.value
    targets = np.asarray(targets)
    if targets.shape != lv.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {lv.shape}")
    z = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    count = targets.size
    loss = -picked.sum() / count

    def bw(g):
        d = probs.copy()
        np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1.0, -1)
        logits._accum(d * (g / count))

    return _make(np.asarray(loss, dtype=lv.dtype), (logits,), bw), probs


# -- gradient checking ------------------------------------------------------------
def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    coords: dict[int, np.ndarray] | None = None,
) -> float:
    """Worst relative error between backprop and central differences.

    ``fn`` rebuilds a scalar from ``params`` on each call. Every coordinate of
    every parameter is probed unless ``coords`` maps a parameter position to a
    subset of flat indices.
    """
    for p in params:
        p.zero_grad()
    out = fn()
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("non-finite function value at the check point")
    out.backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        # own a contiguous array so writes through the flat view reach the parameter
        p.value = np.array(p.value, order="C", copy=True)
        flat = p.value.reshape(-1)
        idxs = range(flat.size) if coords is None or pi not in coords else coords[pi]
        ga = analytic[pi].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().value)
            flat[i] = orig - h
            fm = float(fn().value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite value probing parameter {pi}[{i}]")
            num = (fp - fm) / (2 * h)
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
    for p in params:
        p.zero_grad()
    return worst
