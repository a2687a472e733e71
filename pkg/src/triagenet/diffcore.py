"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations record onto the innermost active :class:`Tape`. Outside any tape
they only compute values, which is how the no-gradient evaluation passes run.

    >>> x = DiffArray([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(x, x))
    >>> tape.backward(loss)[x]
    array([2., 4.])

There is no implicit broadcasting: :func:`broadcast_to` makes every expansion
explicit so each backward rule stays a one-liner.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffArray", "Tape", "DiffError", "ShapeError", "DomainError", "TapeError",
    "constant", "matmul", "affine", "addmm", "bmm", "unary", "binary", "add", "sub", "mul", "div",
    "maximum", "scale", "shift", "broadcast_to", "reshape", "index", "gather",
    "unstack", "sum_", "mean", "concat", "rearrange_group", "rearrange_stride",
    "inverse_rearrange_group", "inverse_rearrange_stride", "softmax",
    "log_softmax", "smoothed_cross_entropy", "lstm_cell", "UNARY_RULES",
]


class DiffError(Exception):
    """Base class for differentiation-core errors."""


class ShapeError(DiffError, ValueError):
    pass


class DomainError(DiffError, ValueError):
    def __init__(self, message: str, index: tuple[int, ...]):
        super().__init__(f"{message} at index {index}")
        self.index = index


class TapeError(DiffError, RuntimeError):
    pass


class DiffArray:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("value", "requires_grad", "name", "_tape", "_slot")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Tape | None = None
        self._slot = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"DiffArray{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return unary("negate", self)


def constant(value) -> DiffArray:
    return value if isinstance(value, DiffArray) else DiffArray(value)


# --------------------------------------------------------------------------
# tape

class _Stack(threading.local):
    def __init__(self):
        self.tapes: list["Tape"] = []


_STACK = _Stack()  # per thread, so worker threads never record onto another's tape


class Tape:
    """Single-threaded recording context; backward may be run once."""

    def __init__(self):
        self.nodes: list[tuple[tuple[int, ...], tuple[int, ...], Callable]] = []
        self.leaves: list[DiffArray] = []
        self._leaf_slots: dict[int, int] = {}
        self._n_slots = 0
        self.consumed = False
        self.visits = 0

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward; record a new one")
        _STACK.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.tapes.remove(self)
        return False

    def _slot_of(self, x: DiffArray) -> int:
        if x._tape is self:
            return x._slot
        slot = self._leaf_slots.get(id(x))
        if slot is None:
            slot = self._leaf_slots[id(x)] = self._n_slots
            self._n_slots += 1
            self.leaves.append(x)
        return slot

    def record(self, inputs: Sequence[DiffArray], outputs: Sequence[DiffArray], backward: Callable):
        in_slots = tuple(self._slot_of(x) if _tracked(x, self) else -1 for x in inputs)
        out_slots = []
        for out in outputs:
            out._tape, out._slot = self, self._n_slots
            out.requires_grad = True
            self._n_slots += 1
            out_slots.append(out._slot)
        self.nodes.append((in_slots, tuple(out_slots), backward))

    def backward(self, loss: DiffArray) -> dict[DiffArray, np.ndarray]:
        """Gradient of scalar ``loss`` for every requires-grad leaf on this tape."""
        if self.consumed:
            raise TapeError("stale tape: backward was already run on this recording")
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        root = loss._slot
        self.consumed = True
        grads: list[np.ndarray | None] = [None] * self._n_slots
        grads[root] = np.ones_like(loss.value)
        for in_slots, out_slots, rule in reversed(self.nodes):
            self.visits += 1
            upstream = [grads[s] for s in out_slots]
            if all(g is None for g in upstream):
                continue
            for s in out_slots:
                grads[s] = None  # free intermediates as we go
            contribs = rule(*upstream)
            for s, g in zip(in_slots, contribs):
                if s < 0 or g is None:
                    continue
                grads[s] = g if grads[s] is None else grads[s] + g
        self.nodes = []
        out = {}
        for leaf in self.leaves:
            g = grads[self._leaf_slots[id(leaf)]]
            out[leaf] = np.zeros_like(leaf.value) if g is None else g
        return out


def _tracked(x: DiffArray, tape: "Tape") -> bool:
    return x._tape is tape or x.requires_grad


def _emit(inputs: Sequence[DiffArray], values: Sequence[np.ndarray], rule: Callable):
    """Wrap computed values; record them when a tape is active and an input is tracked."""
    outs = [DiffArray.__new__(DiffArray) for _ in values]
    for o, v in zip(outs, values):
        o.value, o.requires_grad, o.name, o._tape, o._slot = v, False, "", None, -1
    active = _STACK.tapes
    if active:
        tape = active[-1]
        if tape.consumed:
            raise TapeError("cannot record onto a consumed tape")
        if any(_tracked(x, tape) for x in inputs):
            tape.record(inputs, outs, rule)
    return outs


def _one(inputs, value, rule) -> DiffArray:
    return _emit(inputs, [value], rule)[0]


def _zero_fill(upstream, like):
    return [np.zeros_like(v) if g is None else g for g, v in zip(upstream, like)]


# --------------------------------------------------------------------------
# linear algebra

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """``a[..., M, K] @ b[K, N]``; leading axes of ``a`` act as a batch."""
    a, b = constant(a), constant(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    k, n = bv.shape

    def rule(g):
        return g @ bv.T, av.reshape(-1, k).T @ g.reshape(-1, n)

    return _one((a, b), av @ bv, rule)


def affine(x: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    """``x[..., K] @ w[K, N] + b[N]``, the bias added to every leading position."""
    x, w, b = constant(x), constant(w), constant(b)
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: cannot apply {w.shape} weight / {b.shape} bias to {x.shape}")
    xv, wv = x.value, w.value
    k, n = wv.shape
    y = xv @ wv
    y += b.value

    def rule(g):
        g2 = g.reshape(-1, n)
        return g @ wv.T, xv.reshape(-1, k).T @ g2, g2.sum(axis=0)

    return _one((x, w, b), y, rule)


def addmm(base: DiffArray, a: DiffArray, b: DiffArray) -> DiffArray:
    """``base + a @ b`` for 2-D ``a``, ``b``."""
    base, a, b = constant(base), constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0] or base.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(f"addmm: {base.shape} + {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    y = av @ bv
    y += base.value

    def rule(g):
        return g, g @ bv.T, av.T @ g

    return _one((base, a, b), y, rule)


def bmm(a: DiffArray, b: DiffArray) -> DiffArray:
    """Batched product ``a[B, M, K] @ b[B, K, N]``."""
    a, b = constant(a), constant(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def rule(g):
        return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

    return _one((a, b), av @ bv, rule)


# --------------------------------------------------------------------------
# elementwise

def _sigmoid(x):
    y = np.negative(x, out=np.empty(np.shape(x)))
    with np.errstate(over="ignore"):
        np.exp(y, out=y)
    y += 1.0
    return np.reciprocal(y, out=y)


def _log(x):
    bad = np.argwhere(~(x > 0))
    if bad.size:
        raise DomainError("log of non-positive value", tuple(int(i) for i in bad[0]))
    return np.log(x)


# kind -> (forward(x), derivative(x, y)) with y = forward(x)
UNARY_RULES: dict[str, tuple[Callable, Callable]] = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "exp": (np.exp, lambda x, y: y),
    "log": (_log, lambda x, y: 1.0 / x),
    "negate": (np.negative, lambda x, y: np.full_like(x, -1.0)),
    "softplus": (lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x)),
    "square": (np.square, lambda x, y: 2.0 * x),
}


def unary(kind: str, x: DiffArray) -> DiffArray:
    try:
        fwd, deriv = UNARY_RULES[kind]
    except KeyError:
        raise ValueError(f"unknown unary kind {kind!r}") from None
    x = constant(x)
    xv = x.value
    y = fwd(xv)

    def rule(g):
        return (g * UNARY_RULES[kind][1](xv, y),)

    return _one((x,), y, rule)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def binary(kind: str, a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = constant(a), constant(b)
    _same_shape(kind, a, b)
    av, bv = a.value, b.value
    if kind == "add":
        return _one((a, b), av + bv, lambda g: (g, g))
    if kind == "sub":
        return _one((a, b), av - bv, lambda g: (g, -g))
    if kind == "mul":
        return _one((a, b), av * bv, lambda g: (g * bv, g * av))
    if kind == "div":
        y = av / bv
        return _one((a, b), y, lambda g: (g / bv, -g * y / bv))
    if kind == "max":
        take_a = av >= bv
        return _one((a, b), np.where(take_a, av, bv),
                    lambda g: (np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)))
    raise ValueError(f"unknown binary kind {kind!r}")


def add(a, b): return binary("add", a, b)
def sub(a, b): return binary("sub", a, b)
def mul(a, b): return binary("mul", a, b)
def div(a, b): return binary("div", a, b)
def maximum(a, b): return binary("max", a, b)


def scale(x: DiffArray, c: float) -> DiffArray:
    x = constant(x)
    return _one((x,), x.value * c, lambda g: (g * c,))


def shift(x: DiffArray, c: float) -> DiffArray:
    x = constant(x)
    return _one((x,), x.value + c, lambda g: (g,))


# --------------------------------------------------------------------------
# shape and indexing

def broadcast_to(x: DiffArray, shape: Sequence[int]) -> DiffArray:
    x = constant(x)
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(x.shape) if d == 1 and shape[lead + i] != 1)
    src = x.shape

    def rule(g):
        return (g.sum(axis=axes).reshape(src) if axes else g,)

    return _one((x,), np.ascontiguousarray(y), rule)


def reshape(x: DiffArray, shape: Sequence[int]) -> DiffArray:
    x = constant(x)
    src = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _one((x,), y, lambda g: (g.reshape(src),))


def index(x: DiffArray, key) -> DiffArray:
    """Basic (slice/int) indexing; the gradient scatters back into zeros."""
    x = constant(x)
    src = x.shape

    def rule(g):
        out = np.zeros(src)
        out[key] = g
        return (out,)

    return _one((x,), x.value[key], rule)


def gather(x: DiffArray, idx: np.ndarray) -> DiffArray:
    """Row gather ``x[b, idx[b, j], :]`` for ``x[B, T, C]``, ``idx[B, n]``; repeats allowed."""
    x = constant(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather: bad shapes {x.shape} / {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"gather: index out of range for axis of length {x.shape[1]}")
    rows = np.arange(x.shape[0])[:, None]
    src = x.shape

    def rule(g):
        out = np.zeros(src)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _one((x,), x.value[rows, idx], rule)


def unstack(x: DiffArray, axis: int = 1) -> list[DiffArray]:
    """Split along ``axis`` into views with that axis removed (one node, many outputs)."""
    x = constant(x)
    ax = axis % x.ndim
    vals = [np.take(x.value, i, axis=ax) for i in range(x.shape[ax])]
    src = x.shape

    def rule(*gs):
        out = np.empty(src)
        for i, g in enumerate(gs):
            idx = (slice(None),) * ax + (i,)
            if g is None:
                out[idx] = 0.0
            else:
                out[idx] = g
        return (out,)

    return _emit((x,), vals, rule)


def sum_(x: DiffArray, axis: int | None = None) -> DiffArray:
    x = constant(x)
    src = x.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _one((x,), np.asarray(x.value.sum(axis=axis)), rule)


def mean(x: DiffArray, axis: int | None = None) -> DiffArray:
    x = constant(x)
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def concat(parts: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    parts = [constant(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no parts")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                d != r for i, (d, r) in enumerate(zip(p.shape, ref)) if i != ax):
            raise ShapeError(f"concat: {p.shape} does not match {ref} off axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _one(parts, np.concatenate([p.value for p in parts], axis=ax), rule)


def _check_factor(op, x, n1, n2):
    if x.ndim < 2 or n1 < 1 or n2 < 1 or n1 * n2 != x.shape[-2]:
        raise ShapeError(f"{op}: {n1}*{n2} does not factor row count of {x.shape}")


def rearrange_group(x: DiffArray, n1: int, n2: int) -> DiffArray:
    """``'... n C -> ... n1 n2 C'``: row t lands in clip t // n2, slot t % n2."""
    x = constant(x)
    _check_factor("rearrange_group", x, n1, n2)
    lead, c = x.shape[:-2], x.shape[-1]
    return reshape(x, lead + (n1, n2, c))


def rearrange_stride(x: DiffArray, n1: int, n2: int) -> DiffArray:
    """``'... n C -> ... n2 n1 C'``: group j collects rows j, j+n2, j+2*n2, ..."""
    x = constant(x)
    _check_factor("rearrange_stride", x, n1, n2)
    lead, c = x.shape[:-2], x.shape[-1]
    k = len(lead)
    perm = tuple(range(k)) + (k + 1, k, k + 2)
    y = np.ascontiguousarray(x.value.reshape(lead + (n1, n2, c)).transpose(perm))
    src = x.shape

    def rule(g):
        return (g.transpose(perm).reshape(src),)

    return _one((x,), y, rule)


def inverse_rearrange_group(y: DiffArray) -> DiffArray:
    y = constant(y)
    return reshape(y, y.shape[:-3] + (y.shape[-3] * y.shape[-2], y.shape[-1]))


def inverse_rearrange_stride(y: DiffArray) -> DiffArray:
    y = constant(y)
    lead = y.shape[:-3]
    n2, n1, c = y.shape[-3:]
    k = len(lead)
    perm = tuple(range(k)) + (k + 1, k, k + 2)
    v = np.ascontiguousarray(y.value.transpose(perm)).reshape(lead + (n1 * n2, c))
    src = y.shape

    def rule(g):
        return (g.reshape(lead + (n1, n2, c)).transpose(perm),)

    return _one((y,), v, rule)


# --------------------------------------------------------------------------
# softmax family

def _log_softmax_np(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: DiffArray, axis: int = -1) -> DiffArray:
    x = constant(x)
    y = _log_softmax_np(x.value, axis)
    p = np.exp(y)

    def rule(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _one((x,), y, rule)


def softmax(x: DiffArray, axis: int = -1) -> DiffArray:
    x = constant(x)
    p = np.exp(_log_softmax_np(x.value, axis))

    def rule(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _one((x,), p, rule)


def smoothed_cross_entropy(logits: DiffArray, label, eps: float = 0.0) -> DiffArray:
    """Cross-entropy against ``q = eps/K + (1 - eps) * onehot(label)``.

    ``logits[K]`` with an int label gives a scalar; ``logits[B, K]`` with ``B``
    labels gives one loss per row.
    """
    logits = constant(logits)
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {eps}")
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label {label!r} out of range for {k} classes")
    x = logits.value.reshape(-1, k)
    if x.shape[0] != labels.shape[0]:
        raise ShapeError(f"smoothed_cross_entropy: {x.shape[0]} rows vs {labels.shape[0]} labels")
    q = np.full(x.shape, eps / k)
    q[np.arange(len(labels)), labels] += 1.0 - eps
    lsm = _log_softmax_np(x)
    loss = -(q * lsm).sum(axis=-1)
    p = np.exp(lsm)
    out_shape = () if logits.ndim == 1 else loss.shape

    def rule(g):
        g = np.reshape(g, (-1, 1))
        return (((p - q) * g).reshape(logits.shape),)

    return _one((logits,), loss.reshape(out_shape), rule)


# --------------------------------------------------------------------------
# fused recurrent cell

def lstm_cell(z: DiffArray, c_prev: DiffArray) -> tuple[DiffArray, DiffArray]:
    """One gated step from pre-activations ``z[..., 4H]`` ordered (input, forget, output, candidate)."""
    z, c_prev = constant(z), constant(c_prev)
    hd = c_prev.shape[-1]
    if z.shape[:-1] != c_prev.shape[:-1] or z.shape[-1] != 4 * hd:
        raise ShapeError(f"lstm_cell: pre-activations {z.shape} vs cell {c_prev.shape}")
    zv, cp = z.value, c_prev.value
    s = _sigmoid(zv[..., :3 * hd])
    i, f, o = s[..., :hd], s[..., hd:2 * hd], s[..., 2 * hd:]
    g = np.tanh(zv[..., 3 * hd:])
    c = f * cp + i * g
    tc = np.tanh(c)
    h = o * tc

    def rule(gh, gc):
        if gh is None:
            gh = np.zeros_like(h)
        dc = gh * o
        dc *= 1.0 - tc * tc
        if gc is not None:
            dc += gc
        dz = np.empty(zv.shape)
        np.multiply(dc, g, out=dz[..., :hd])
        np.multiply(dc, cp, out=dz[..., hd:2 * hd])
        np.multiply(gh, tc, out=dz[..., 2 * hd:3 * hd])
        dz[..., :3 * hd] *= s * (1.0 - s)
        np.multiply(dc, i, out=dz[..., 3 * hd:])
        dz[..., 3 * hd:] *= 1.0 - g * g
        return dz, dc * f

    h_out, c_out = _emit((z, c_prev), [h, c], rule)
    return h_out, c_out
