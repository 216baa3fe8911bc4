"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records operations in execution order (define-by-run).
Leaves are registered with :meth:`Tape.var`; any array that is not
registered is a constant and receives no gradient.  Calling
:meth:`Tape.backward` on a scalar walks the records in exact reverse order.

    >>> tape = Tape()
    >>> x = tape.var([1.0, 2.0, 3.0])
    >>> grads = tape.backward(ad_sum(square(x)))
    >>> grads[x.node].tolist()
    [2.0, 4.0, 6.0]

Broadcasting follows numpy for ``add``, ``sub`` and ``mul`` (a bias row of
shape ``(1, n)`` or ``(n,)`` against a ``(batch, n)`` block); gradients are
summed back to the input shape.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "constant",
    "record",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "square",
    "softplus",
    "ad_sum",
    "mean",
    "concat",
    "take",
    "OP_KINDS",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape=None, node=None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self):
        return self.node is not None

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor({self.value!r}, {tag})"

    # operator sugar; the functional API below is the primary surface
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def constant(x):
    """Wrap ``x`` as a tape-less tensor (no gradient flows into it)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Every record is ``(output node, input tensors, vjp)`` where ``vjp`` maps
    the output cotangent to one cotangent per input.  Leaves carry an empty
    input tuple.  A tape is single-threaded; separate tapes share no state.
    """

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def var(self, value):
        """Register ``value`` as a differentiable leaf."""
        arr = np.array(value, dtype=np.float64)
        t = Tensor(arr, self, len(self._records))
        self._records.append((t, (), None))
        return t

    def _push(self, value, inputs, vjp):
        t = Tensor(value, self, len(self._records))
        self._records.append((t, inputs, vjp))
        return t

    def leaves(self):
        return [rec[0] for rec in self._records if rec[2] is None]

    def backward(self, loss):
        """Return ``{leaf node id: gradient array}`` for d(loss)/d(leaf).

        Leaves the loss does not depend on get a zero gradient.
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        cot = {loss.node: np.ones_like(loss.value)}
        grads = {}
        for idx in range(loss.node, -1, -1):
            out, inputs, vjp = self._records[idx]
            g = cot.pop(idx, None)
            if vjp is None:
                grads[idx] = g if g is not None else np.zeros_like(out.value)
                continue
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if inp.node is None or gi is None:
                    continue
                prev = cot.get(inp.node)
                cot[inp.node] = gi if prev is None else prev + gi
        for idx in range(loss.node + 1, len(self._records)):
            out, _, vjp = self._records[idx]
            if vjp is None:
                grads[idx] = np.zeros_like(out.value)
        return grads

    def reset(self):
        self._records.clear()


def _lift(x):
    return x if isinstance(x, Tensor) else constant(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _finish(value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None or all(t.node is None for t in inputs):
        return Tensor(value)
    return tape._push(value, inputs, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    sa, sb = a.value.shape, b.value.shape
    if sa == sb or (len(sb) == 1 and sa and sa[-1] == sb[0]):
        return sa
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:  # (n, k) @ (k,)
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:  # (k,) @ (k, m)
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _finish(out, (a, b), vjp)


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    sa, sb = a.value.shape, b.value.shape
    return _finish(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.value.shape, b.value.shape
    return _finish(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _finish(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c):
    a = _lift(a)
    c = float(c)
    return _finish(a.value * c, (a,), lambda g: (g * c,))


def tanh(a):
    a = _lift(a)
    y = np.tanh(a.value)
    return _finish(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = _lift(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _finish(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    a = _lift(a)
    y = np.exp(a.value)
    return _finish(y, (a,), lambda g: (g * y,))


def log(a):
    a = _lift(a)
    x = a.value
    return _finish(np.log(x), (a,), lambda g: (g / x,))


def square(a):
    a = _lift(a)
    x = a.value
    return _finish(x * x, (a,), lambda g: (2.0 * g * x,))


def softplus(a):
    a = _lift(a)
    x = a.value
    y = np.logaddexp(0.0, x)
    return _finish(y, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


def ad_sum(a, axis=None):
    a = _lift(a)
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=axis is not None)

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.asarray(out), (a,), vjp)


def mean(a, axis=None):
    a = _lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(ad_sum(a, axis), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    vals = [t.value for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " +
                         ", ".join(str(v.shape) for v in vals)) from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish(out, tuple(tensors), vjp)


def take(a, key):
    """Index ``a`` with any numpy key (basic slices or integer arrays)."""
    a = _lift(a)
    x = a.value
    try:
        out = x[key]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {x.shape}") from None
    basic = _is_basic(key)

    def vjp(g):
        full = np.zeros_like(x)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _finish(np.array(out, copy=True), (a,), vjp)


def _is_basic(key):
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in keys)


OP_KINDS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": ad_sum,
    "mean": mean,
    "concat": concat,
    "slice": take,
    "scalar-scale": scale,
    "softplus": softplus,
}


def record(kind, *inputs, **kwargs):
    """Dispatch an operation by name, e.g. ``record("matmul", a, b)``."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
