"""Dense float64 arrays with a small reverse-mode gradient tape.

Arrays are plain numpy ``ndarray`` objects wrapped in :class:`Tensor`.  Ops
record themselves on the active :class:`GradTape` only when one of their
inputs requires a gradient, so inference without a tape runs at numpy speed.

Usage::

    with GradTape() as tape:
        loss = sum_all(mul(w, w))
    grads = tape.backward(loss)    # {"w": 2 * w.data}
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

DTYPE = np.float64

_local = threading.local()

# Set to False to skip the per-op NaN/Inf scan (one pass over each output).
CHECK_FINITE = True


class Tensor:
    """A float64 array plus the bookkeeping the tape needs."""

    __slots__ = ("data", "requires_grad", "name", "_tape_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._tape_id = None  # set when produced by a recorded op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape_id is None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    """A leaf tensor that the tape reports gradients for."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Ordered log of executed ops plus a registry of the parameters they touched.

    A tape is active inside its ``with`` block (per thread).  ``backward`` walks
    the log in exact reverse order and returns ``{param name: gradient}``; the
    gradient of every registered parameter has that parameter's shape.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.params: dict[str, Tensor] = {}
        self._prev = None

    def __enter__(self) -> GradTape:
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def _push(self, out: Tensor, parents: Sequence[Tensor], backward) -> None:
        for p in parents:
            if p.requires_grad and p.is_leaf:
                key = p.name if p.name is not None else f"_anon{id(p)}"
                self.params.setdefault(key, p)
        out._tape_id = (id(self), len(self.records))
        self.records.append(_Record(out, parents, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | float = 1.0) -> dict[str, np.ndarray]:
        if not self.records or loss._tape_id != (id(self), len(self.records) - 1):
            raise UsageError("backward() needs the final value recorded on this tape; run a forward pass first")
        grads: dict[int, np.ndarray] = {id(loss): np.broadcast_to(np.asarray(seed, dtype=DTYPE), loss.shape).copy()}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for name, p in self.params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
        return out


@contextmanager
def per_op_finite_checks(enabled: bool) -> Iterator[None]:
    """Turn the per-op NaN/Inf check on or off for this thread only.

    Callers that switch it off should check the values that everything flows
    into (a loss, a gradient norm) instead.
    """
    prev = getattr(_local, "check_finite", None)
    _local.check_finite = enabled
    try:
        yield
    finally:
        if prev is None:
            del _local.check_finite
        else:
            _local.check_finite = prev


def current_tape() -> GradTape | None:
    return getattr(_local, "tape", None)


def record(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` as a Tensor and log it on the active tape if needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    if getattr(_local, "check_finite", CHECK_FINITE) and not np.isfinite(out_data).all():
        raise FloatingPointError("non-finite value produced")
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._push(out, parents, backward)
    return out


# ---------------------------------------------------------------------------
# FLOP tally (matmuls only, 2 flops per multiply-add)

@contextmanager
def count_matmul_flops() -> Iterator[list[int]]:
    """Tally 2*m*n*k for every matmul executed in this thread."""
    prev = getattr(_local, "flops", None)
    tally = [0]
    _local.flops = tally
    try:
        yield tally
    finally:
        _local.flops = prev


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    tally = getattr(_local, "flops", None)
    if tally is not None:
        tally[0] += 2 * out.size * a.shape[-1]

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data * c, (a,), lambda g: (g * c,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(np.where(take_a, g, 0.0), a.shape), _unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return record(np.where(take_a, a.data, b.data), (a, b), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (broadcastable bool) marks allowed positions.

    Masked positions get weight exactly 0.
    """
    x = as_tensor(x)
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != data.shape[-1]:
            raise ShapeError(f"mask length {mask.shape[-1]} != last dim {data.shape[-1]}")
        if mask.all():
            mask = None  # same values, fewer passes
    if mask is None:
        m = data.max(axis=-1, keepdims=True)
        e = np.exp(data - m)
    else:
        allowed = np.broadcast_to(mask, data.shape)
        if not allowed.any(axis=-1).all():
            raise ShapeError("empty attention row")
        m = np.where(allowed, data, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(allowed, np.exp(np.where(allowed, data - m, 0.0)), 0.0)
    e /= e.sum(axis=-1, keepdims=True)
    p = e

    def backward(g):
        gp = g * p
        s = gp.sum(axis=-1, keepdims=True)
        gp -= p * s
        return (gp,)

    return record(p, (x,), backward)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, normalised over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"gain shape {gain.shape} != ({x.shape[-1]},)")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * r
    out = normed * gain.data

    def backward(g):
        u = g * gain.data
        d = x.shape[-1]
        gx = r * u - x.data * (r ** 3) * (u * x.data).sum(axis=-1, keepdims=True) / d
        gg = (g * normed).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        return gx, gg

    return record(out, (x, gain), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Tanh-approximate GELU."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    # In-place form of C * (v + 0.044715 * v^2 * v) and 0.5 * v * (1 + t),
    # keeping the rounding order of the plain expressions.
    t = v2 * 0.044715
    t *= v
    t += v
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= v
    out *= 0.5

    def backward(g):
        d = v2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        d *= sech2
        d *= v
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return record(out, (x,), backward)


def gather(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding)."""
    table = as_tensor(table)
    ids = np.asarray(ids)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return record(table.data[ids], (table,), backward)


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood over the leading axes.

    ``logits`` is (..., C); ``targets`` holds class indices with shape (...).
    Zero-weight positions are ignored; at least one weight must be positive.
    """
    logits = as_tensor(logits)
    c = logits.shape[-1]
    z = logits.data.reshape(-1, c)
    t = np.asarray(targets).reshape(-1)
    w = np.ones(t.shape, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise UsageError("cross_entropy needs at least one weighted position")
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    rows = np.arange(t.size)
    nll = lse - z[rows, t]
    loss = np.asarray((w * nll).sum() / total)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return ((p * (w / total)[:, None] * g).reshape(logits.shape),)

    return record(loss, (logits,), backward)
