"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape, the same functions simply
compute values, which keeps inference free of graph bookkeeping.

    with Tape() as tape:
        loss = ...
    grads = tape.gradient(loss, params)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
POW_FLOOR = 1e-12

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Records operations in execution order; backward walks them in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self.disconnected: list[str | None] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` wrt ``params``; unreachable params get zeros."""
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        wanted = {id(p) for p in params}
        for out, inputs, backward in reversed(self.records):
            g = grads.get(id(out)) if id(out) in wanted else grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.disconnected = [p.name for p in params if id(p) not in grads]
        return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, inputs: tuple, backward: Callable) -> Tensor:
    tracked = bool(_TAPES) and any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor(value, requires_grad=tracked)
    if tracked:
        _TAPES[-1].records.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    return _record(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def neg(a) -> Tensor:
    a = _tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def reciprocal(a) -> Tensor:
    a = _tensor(a)
    v = 1.0 / a.value
    return _record(v, (a,), lambda g: (-g * v * v,))


def relu(a) -> Tensor:
    a = _tensor(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


def selu(a) -> Tensor:
    a = _tensor(a)
    pos = a.value > 0
    ex = np.exp(np.minimum(a.value, 0.0))
    v = SELU_SCALE * np.where(pos, a.value, SELU_ALPHA * (ex - 1.0))
    d = SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * ex)
    return _record(v, (a,), lambda g: (g * d,))


def absolute(a) -> Tensor:
    a = _tensor(a)
    s = np.sign(a.value)
    return _record(np.abs(a.value), (a,), lambda g: (g * s,))


def sgn(a) -> np.ndarray:
    """Sign as a constant array (zero at zero); it carries no gradient."""
    return np.sign(a.value if isinstance(a, Tensor) else np.asarray(a, dtype=DTYPE))


def pow_abs(a, exponent) -> Tensor:
    """|a|^exponent; ``exponent`` is a constant scalar or array broadcastable to ``a``."""
    a = _tensor(a)
    p = np.asarray(exponent, dtype=DTYPE)
    mag = np.abs(a.value)
    v = mag**p

    def backward(g):
        d = p * np.sign(a.value) * np.maximum(mag, POW_FLOOR) ** (p - 1.0)
        return (g * d,)

    return _record(v, (a,), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _tensor(a), _tensor(b)
    take_a = a.value >= b.value
    return _record(np.where(take_a, a.value, b.value), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _tensor(a), _tensor(b)
    take_a = a.value <= b.value
    return _record(np.where(take_a, a.value, b.value), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)))


def where(mask, a, b) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    a, b = _tensor(a), _tensor(b)
    return _record(np.where(mask, a.value, b.value), (a, b),
                   lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


# -- reductions and shape ----------------------------------------------------------


def total(a, axis=None) -> Tensor:
    a = _tensor(a)
    v = a.value.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(v, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = _tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(total(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _tensor(a)
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = _tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return _record(a.value[index], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.value for t in ts], axis=axis), tuple(ts),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(x, w) -> Tensor:
    """``x`` of shape (..., k) times a 2-D ``w`` of shape (k, m)."""
    x, w = _tensor(x), _tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {x.shape} @ {w.shape}")

    k, m = w.shape
    x2 = x.value.reshape(-1, k)  # one GEMM instead of a stack of small ones

    def backward(g):
        g2 = g.reshape(-1, m)
        return (g2 @ w.value.T).reshape(x.shape), x2.T @ g2

    return _record((x2 @ w.value).reshape(x.shape[:-1] + (m,)), (x, w), backward)


def transpose(a, axes) -> Tensor:
    a = _tensor(a)
    inv = np.argsort(axes)
    return _record(np.ascontiguousarray(np.transpose(a.value, axes)), (a,),
                   lambda g: (np.transpose(g, inv),))


# -- graph primitives ---------------------------------------------------------------


class Segments:
    """Precomputed grouping of positions by segment id, for segment reductions.

    Sums go through a sparse incidence matrix. Maxima use a padded
    (segment, member) table whose columns list members in position order.
    """

    def __init__(self, ids, n_segments: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
            raise ShapeError("segment id out of range")
        self.ids = ids
        self.n = int(n_segments)
        counts = np.bincount(ids, minlength=self.n)
        self.nonempty = np.flatnonzero(counts > 0)
        self.matrix = sp.csr_matrix((np.ones(len(ids)), (ids, np.arange(len(ids)))), shape=(self.n, len(ids)))
        order = np.argsort(ids, kind="stable")
        starts = np.cumsum(counts) - counts
        rank = np.empty(len(ids), dtype=np.int64)
        rank[order] = np.arange(len(ids)) - starts[ids[order]]
        width = int(counts.max()) if len(ids) else 0
        # padded member table; the sentinel len(ids) points at a filler row
        self.table = np.full((self.n, width), len(ids), dtype=np.int64)
        for j in range(width):
            pos = np.flatnonzero(rank == j)
            self.table[ids[pos], j] = pos
        self.empty = counts == 0

    def __len__(self):
        return len(self.ids)


def _segments(seg, n=None) -> Segments:
    return seg if isinstance(seg, Segments) else Segments(seg, n)


def _axis(axis, ndim):
    return axis % ndim


def segment_sum_array(x: np.ndarray, seg: Segments, axis: int = 0) -> np.ndarray:
    """Plain-array segment sum along ``axis``."""
    x = np.moveaxis(np.asarray(x, dtype=DTYPE), axis, 0)
    rest = x.shape[1:]
    out = seg.matrix @ np.ascontiguousarray(x).reshape(len(seg), -1)
    return np.moveaxis(np.asarray(out).reshape((seg.n,) + rest), 0, axis)


def _padded(x: np.ndarray, filler: float) -> np.ndarray:
    return np.concatenate([x, np.full((1,) + x.shape[1:], filler, dtype=DTYPE)])


def segment_max_array(x: np.ndarray, seg: Segments, axis: int = 0, fill: float = -np.inf) -> np.ndarray:
    """Plain-array segment max along ``axis``; empty segments get ``fill``."""
    x = np.moveaxis(np.asarray(x, dtype=DTYPE), axis, 0)
    out = np.full((seg.n,) + x.shape[1:], fill, dtype=DTYPE)
    if seg.table.shape[1]:
        xp = _padded(x, -np.inf)
        out = xp[seg.table[:, 0]]
        for j in range(1, seg.table.shape[1]):
            np.maximum(out, xp[seg.table[:, j]], out=out)
        if seg.empty.any():
            out[seg.empty] = fill
    return np.moveaxis(out, 0, axis)


def gather(a, index, axis: int = 0) -> Tensor:
    """``take`` along ``axis``; ``index`` may be an array or a :class:`Segments`."""
    a = _tensor(a)
    ax = _axis(axis, a.ndim)
    seg = index if isinstance(index, Segments) else None
    idx = seg.ids if seg is not None else np.asarray(index, dtype=np.int64)

    def backward(g):
        s = seg if seg is not None else Segments(idx, a.shape[ax])
        return (segment_sum_array(g, s, ax),)

    return _record(np.take(a.value, idx, axis=ax), (a,), backward)


def scatter(a, index, size: int, axis: int = 0) -> Tensor:
    """Place ``a`` at distinct positions ``index`` of a zero tensor of length ``size``."""
    a = _tensor(a)
    ax = _axis(axis, a.ndim)
    idx = np.asarray(index, dtype=np.int64)
    shape = list(a.shape)
    shape[ax] = size
    out = np.zeros(shape, dtype=DTYPE)
    sl = [slice(None)] * a.ndim
    sl[ax] = idx
    out[tuple(sl)] = a.value
    return _record(out, (a,), lambda g: (np.take(g, idx, axis=ax),))


def segment_sum(a, segments, n_segments: int | None = None, axis: int = 0) -> Tensor:
    a = _tensor(a)
    ax = _axis(axis, a.ndim)
    seg = _segments(segments, n_segments)
    return _record(segment_sum_array(a.value, seg, ax), (a,),
                   lambda g: (np.take(g, seg.ids, axis=ax),))


def segment_max(a, segments, n_segments: int | None = None, axis: int = 0,
                fill: float = -np.inf) -> Tensor:
    """Per-segment maximum; empty segments get ``fill``.

    The gradient flows to the maximising element only, the lowest index among
    ties.
    """
    a = _tensor(a)
    ax = _axis(axis, a.ndim)
    seg = _segments(segments, n_segments)
    out = segment_max_array(a.value, seg, ax, fill)

    def backward(g):
        # route to the first member (in position order) that attains the max
        g0 = np.moveaxis(g, ax, 0)
        out0 = np.moveaxis(out, ax, 0)
        xp = _padded(np.moveaxis(a.value, ax, 0), -np.inf)
        grad = np.zeros(xp.shape, dtype=DTYPE)
        claimed = np.zeros(out0.shape, dtype=bool)
        for j in range(seg.table.shape[1]):
            rows = seg.table[:, j]
            hit = xp[rows] == out0
            hit &= ~claimed
            claimed |= hit
            grad[rows] = np.where(hit, g0, 0.0)
        return (np.moveaxis(grad[:-1], 0, ax),)

    return _record(out, (a,), backward)


def no_grad_value(a) -> np.ndarray:
    return a.value if isinstance(a, Tensor) else np.asarray(a, dtype=DTYPE)
