"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to :class:`Variable` objects
while it is active.  ``tape.backward(root)`` walks the record in reverse and
accumulates vector-Jacobian products into per-node gradient buffers.

Operations executed with no active tape compute values only, so the same
model code serves training (under a tape) and evaluation (without one).

    >>> x = Variable([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum(square(x))
    >>> tape.backward(y)[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "Tape",
    "Variable",
    "as_variable",
    "backward",
    "custom_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "square",
    "sqrt",
    "abs",
    "relu",
    "elu",
    "softplus",
    "sigmoid",
    "sum",
    "mean",
    "logsumexp",
    "log_softmax",
    "softmax",
    "stop_gradient",
    "reshape",
    "swapaxes",
    "expand_dims",
    "getitem",
    "take_along_axis",
    "concatenate",
    "stack",
    "tril_solve",
    "where",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Variable:
    """A float64 array plus its place in the active tape."""

    __slots__ = ("value", "requires_grad", "grad", "name", "_node")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.value)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


class Tape:
    """Ordered record of differentiable operations.

    Node ``i`` holds the output variable, its parent variables and the
    vector-Jacobian closure.  Parents are always recorded before children,
    so reverse iteration is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[Variable, tuple[Variable, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Variable, parents: tuple[Variable, ...], vjp: Callable) -> None:
        out._node = len(self.nodes)
        out.requires_grad = True
        self.nodes.append((out, parents, vjp))

    def backward(self, root: Variable, wrt: Iterable[Variable] | None = None):
        """Gradients of scalar ``root`` with respect to every reachable leaf.

        Returns a dict keyed by variable.  Leaves listed in ``wrt`` that the
        root does not depend on get zero arrays.  ``.grad`` is set on each
        requires-grad leaf touched.
        """
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        buffers: dict[int, np.ndarray] = {}
        leaves: dict[int, Variable] = {}
        if root._node is not None and self._owns(root):
            buffers[id(root)] = np.ones_like(root.value)
        elif root.requires_grad:
            leaves[id(root)] = root
            buffers[id(root)] = np.ones_like(root.value)

        for out, parents, vjp in reversed(self.nodes):
            g = buffers.pop(id(out), None)
            if g is None:
                continue
            pgrads = vjp(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None or not self._owns(p):
                    leaves[id(p)] = p
                key = id(p)
                prev = buffers.get(key)
                buffers[key] = pg if prev is None else prev + pg

        grads = {}
        for key, leaf in leaves.items():
            leaf.grad = buffers[key]
            grads[leaf] = buffers[key]
        if wrt is not None:
            for v in wrt:
                if v not in grads:
                    grads[v] = np.zeros_like(v.value)
                    v.grad = grads[v]
        return _GradMap(grads)

    def _owns(self, v: Variable) -> bool:
        i = v._node
        return i is not None and i < len(self.nodes) and self.nodes[i][0] is v


class _GradMap(dict):
    """dict keyed by Variable identity."""

    def __missing__(self, key):
        raise KeyError(f"no gradient recorded for {key!r}")


# Variables hash by identity so they can key gradient maps.
Variable.__hash__ = object.__hash__  # type: ignore[assignment]
Variable.__eq__ = object.__eq__  # type: ignore[assignment]


def backward(root: Variable, wrt: Sequence[Variable]) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. ``wrt`` using the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() needs an active Tape")
    grads = tape.backward(root, wrt)
    return [grads[v] for v in wrt]


def custom_op(value: np.ndarray, parents: Sequence[Variable], vjp: Callable) -> Variable:
    """Record a fused operation with a hand-written vector-Jacobian product.

    ``vjp(g)`` returns one gradient (or None) per parent, each shaped like it.
    """
    return _make(np.asarray(value, dtype=np.float64), tuple(parents), vjp)


def _make(value: np.ndarray, parents: tuple[Variable, ...], vjp: Callable) -> Variable:
    out = Variable.__new__(Variable)
    out.value = value
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._node = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from err


# ---------------------------------------------------------------------------
# binary arithmetic


def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape(a.value, b.value)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape(a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Variable:
    a = as_variable(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Variable:
    """Matrix product with numpy batching rules; 1-d operands are not promoted."""
    a, b = as_variable(a), as_variable(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    try:
        out = av @ bv
    except ValueError as err:
        raise ShapeError(str(err)) from err

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), vjp)


def where(cond, a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ---------------------------------------------------------------------------
# elementwise


def exp(a) -> Variable:
    a = as_variable(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Variable:
    """Natural log.  ``log(0) = -inf`` is allowed; negative input raises."""
    a = as_variable(a)
    av = a.value
    if np.any(av < 0):
        raise DomainError("log of negative input")
    with np.errstate(divide="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,))


def square(a) -> Variable:
    a = as_variable(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Variable:
    a = as_variable(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def abs(a) -> Variable:  # noqa: A001 - mirrors numpy naming
    a = as_variable(a)
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def relu(a) -> Variable:
    a = as_variable(a)
    av = a.value
    return _make(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def elu(a) -> Variable:
    """ELU with unit alpha."""
    a = as_variable(a)
    av = a.value
    neg_part = np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, neg_part)
    return _make(out, (a,), lambda g: (g * np.where(av > 0, 1.0, neg_part + 1.0),))


def softplus(a) -> Variable:
    a = as_variable(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), lambda g: (g * _sigmoid(av),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Variable:
    a = as_variable(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def stop_gradient(a) -> Variable:
    """Same value, no parent edge."""
    a = as_variable(a)
    return Variable(a.value)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_to(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Variable:  # noqa: A001
    a = as_variable(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = np.sum(a.value, axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand_to(g, shape, axes, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Variable:
    a = as_variable(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[i] for i in axes])) if axes else 1
    out = np.mean(a.value, axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand_to(g / n, shape, axes, keepdims),))


def _lse(x: np.ndarray, axes, keepdims=False):
    m = np.max(x, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(x - m), axis=axes, keepdims=True)) + m
    return s if keepdims else np.squeeze(s, axis=axes)


def logsumexp(a, axis=None, keepdims: bool = False) -> Variable:
    """Overflow-safe ``log(sum(exp(a)))``; all ``-inf`` slices give ``-inf``."""
    a = as_variable(a)
    axes = _norm_axis(axis, a.ndim)
    av = a.value
    full = _lse(av, axes, keepdims=True)
    out = full if keepdims else np.squeeze(full, axis=axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        with np.errstate(invalid="ignore"):
            w = np.exp(av - full)
        return (g * w,)

    return _make(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Variable:
    a = as_variable(a)
    av = a.value
    out = av - _lse(av, (axis % av.ndim,), keepdims=True)

    def vjp(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Variable:
    return exp(log_softmax(a, axis))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Variable:
    a = as_variable(a)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from err
    return _make(out, (a,), lambda g: (g.reshape(src),))


def swapaxes(a, ax1: int, ax2: int) -> Variable:
    a = as_variable(a)
    return _make(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def expand_dims(a, axis) -> Variable:
    a = as_variable(a)
    src = a.shape
    return _make(np.expand_dims(a.value, axis), (a,), lambda g: (g.reshape(src),))


def getitem(a, index) -> Variable:
    a = as_variable(a)
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.value[index]), (a,), vjp)


def take_along_axis(a, indices: np.ndarray, axis: int) -> Variable:
    a = as_variable(a)
    src = a.shape
    indices = np.asarray(indices)

    def vjp(g):
        full = np.zeros(src)
        idx = np.broadcast_to(indices, g.shape) if indices.shape != g.shape else indices
        # put_along_axis does not accumulate repeated indices
        ax = axis % len(src)
        grid = list(np.indices(g.shape, sparse=True))
        grid[ax] = idx
        np.add.at(full, tuple(grid), g)
        return (full,)

    return _make(np.take_along_axis(a.value, indices, axis), (a,), vjp)


def concatenate(xs: Sequence, axis: int = 0) -> Variable:
    xs = [as_variable(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([x.value for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(xs: Sequence, axis: int = 0) -> Variable:
    xs = [expand_dims(as_variable(x), axis) for x in xs]
    return concatenate(xs, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def tril_solve(L, b) -> Variable:
    """Solve ``L x = b`` for lower-triangular ``L`` [..., d, d] and ``b`` [..., d].

    Leading dims broadcast.  Forward substitution is vectorised over the
    batch and loops over ``d``, which is small for latent spaces.
    """
    L, b = as_variable(L), as_variable(b)
    Lv, bv = L.value, b.value
    d = Lv.shape[-1]
    if Lv.shape[-2] != d or bv.shape[-1] != d:
        raise ShapeError(f"tril_solve shapes {Lv.shape} and {bv.shape} do not conform")
    x = _forward_sub(Lv, bv)

    def vjp(g):
        gb = _backward_sub(Lv, g)
        gL = -gb[..., :, None] * x[..., None, :]
        gL = np.tril(gL)
        return _unbroadcast(gL, Lv.shape), _unbroadcast(gb, bv.shape)

    return _make(x, (L, b), vjp)


def _forward_sub(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = L.shape[-1]
    shape = np.broadcast_shapes(L.shape[:-2], b.shape[:-1]) + (d,)
    x = np.empty(shape)
    for i in range(d):
        acc = b[..., i]
        if i:
            acc = acc - np.sum(L[..., i, :i] * x[..., :i], axis=-1)
        x[..., i] = acc / L[..., i, i]
    return x


def _backward_sub(L: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``L^T y = g``."""
    d = L.shape[-1]
    shape = np.broadcast_shapes(L.shape[:-2], g.shape[:-1]) + (d,)
    y = np.empty(shape)
    for i in reversed(range(d)):
        acc = g[..., i]
        if i < d - 1:
            acc = acc - np.sum(L[..., i + 1 :, i] * y[..., i + 1 :], axis=-1)
        y[..., i] = acc / L[..., i, i]
    return y
