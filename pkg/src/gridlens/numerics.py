"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every op computes its value with numpy. When a :class:`GradientTape` is
active and at least one operand was produced under it, the op appends a node
holding the adjoint closure. Arrays that never touched the tape behave as
constants, so model code runs unchanged with or without gradients.

Broadcasting is limited to identical shapes, a trailing-suffix operand
(leading-batch / per-row affine) and 0-d scalars.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

LN_EPS = 1e-5
# Finite stand-in for -inf in additive attention masks: exp underflows to an
# exact 0 while every stored value stays finite.
NEG_INF = -1e30


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TapeReuseError(RuntimeError):
    pass


class DenseArray:
    """Immutable float64 array, optionally tracked by a gradient tape."""

    __slots__ = ("data", "_tape", "_index")

    def __init__(self, data, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        arr.flags.writeable = False
        self.data = arr
        self._tape: GradientTape | None = None
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "DenseArray":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out._tape = None
        out._index = -1
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tracked = ", tracked" if self._tape is not None else ""
        return f"DenseArray(shape={self.shape}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(asarray(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(asarray(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def asarray(x) -> DenseArray:
    if isinstance(x, DenseArray):
        return x
    return DenseArray(x)


def zeros(shape) -> DenseArray:
    return DenseArray._wrap(np.zeros(shape))


# --------------------------------------------------------------------------
# tape


_local = threading.local()


def _active_tape() -> "GradientTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    key: Hashable | None = None


@dataclass
class GradientTape:
    """Ordered record of primitive ops; single use."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False
    _n_inputs: int = 0

    def __enter__(self) -> "GradientTape":
        if self.consumed:
            raise TapeReuseError("tape already consumed by backward()")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def watch(self, x, key: Hashable | None = None) -> DenseArray:
        """Register ``x`` as a differentiable input; returns a tracked copy."""
        if self.consumed:
            raise TapeReuseError("tape already consumed by backward()")
        if key is None:
            key = self._n_inputs
        self._n_inputs += 1
        src = asarray(x)
        out = DenseArray._wrap(src.data.copy())
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(_Node((), None, out.shape, key))
        return out


def _record(value: np.ndarray, operands: Sequence[DenseArray], backward) -> DenseArray:
    out = DenseArray._wrap(value)
    tape = _active_tape()
    if tape is None:
        return out
    live = [i for i, op in enumerate(operands) if op._tape is tape]
    if not live:
        return out
    parents = tuple(op._index if op._tape is tape else -1 for op in operands)
    out._tape = tape
    out._index = len(tape.nodes)
    tape.nodes.append(_Node(parents, backward, value.shape))
    return out


def backward(tape: GradientTape, output_scalar: DenseArray) -> dict[Hashable, DenseArray]:
    """Reverse sweep; returns d(output)/d(input) for every watched input."""
    if tape.consumed:
        raise TapeReuseError("tape already consumed by backward()")
    if output_scalar.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output_scalar.shape}")
    if output_scalar._tape is not None and output_scalar._tape is not tape:
        raise ContractError("output was recorded on a different tape")
    if output_scalar._tape is None:
        # Output independent of every input: all gradients are zero.
        grads_out = {n.key: zeros(n.shape) for n in tape.nodes if n.backward is None}
        tape.consumed = True
        return grads_out

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[output_scalar._index] = np.ones(output_scalar.shape)
    for i in range(output_scalar._index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.backward is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if p < 0 or pg is None:
                continue
            grads[p] = pg if grads[p] is None else grads[p] + pg
    tape.consumed = True
    out = {}
    for i, node in enumerate(tape.nodes):
        if node.backward is None:
            g = grads[i]
            out[node.key] = DenseArray._wrap(np.zeros(node.shape) if g is None else np.asarray(g, dtype=np.float64))
    return out


# --------------------------------------------------------------------------
# shape helpers


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    short, long_ = (a, b) if a.ndim < b.ndim else (b, a)
    if short.ndim < long_.ndim and long_.shape[long_.ndim - short.ndim:] == short.shape:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> DenseArray:
    a, b = asarray(a), asarray(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DenseArray:
    a, b = asarray(a), asarray(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> DenseArray:
    a, b = asarray(a), asarray(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def exp(x) -> DenseArray:
    x = asarray(x)
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x) -> DenseArray:
    x = asarray(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x) -> DenseArray:
    x = asarray(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def where(mask, a, b) -> DenseArray:
    """Elementwise select; ``mask`` is a constant boolean array of the output shape."""
    a, b = asarray(a), asarray(b)
    mask = np.asarray(mask, dtype=bool)
    if not (a.shape == b.shape == mask.shape):
        raise DimensionError(f"where: shapes {mask.shape}, {a.shape}, {b.shape} differ")
    return _record(np.where(mask, a.data, b.data), (a, b), lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)))


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> DenseArray:
    a, b = asarray(a), asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    short, long_ = (la, lb) if len(la) <= len(lb) else (lb, la)
    if short and long_[len(long_) - len(short):] != short:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), adjoint)


def transpose(x, axes: Sequence[int]) -> DenseArray:
    x = asarray(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape: Sequence[int]) -> DenseArray:
    x = asarray(x)
    orig = x.shape
    return _record(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(orig),))


def index(x, key) -> DenseArray:
    """numpy-style indexing; the adjoint scatters with accumulation."""
    x = asarray(x)
    orig = x.shape

    def adjoint(g):
        gx = np.zeros(orig)
        np.add.at(gx, key, g)
        return (gx,)

    return _record(np.array(x.data[key]), (x,), adjoint)


def gather_rows(table, ids) -> DenseArray:
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    return index(table, np.asarray(ids, dtype=np.int64))


def concat(arrays: Sequence, axis: int = 0) -> DenseArray:
    arrs = [asarray(a) for a in arrays]
    sizes = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def adjoint(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate([a.data for a in arrs], axis=axis), tuple(arrs), adjoint)


def sum(x, axis: int | None = None) -> DenseArray:  # noqa: A001 - mirrors numpy
    x = asarray(x)
    shape = x.shape

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis)), (x,), adjoint)


def mean(x, axis: int | None = None) -> DenseArray:
    x = asarray(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# --------------------------------------------------------------------------
# normalizations


def softmax(x, axis: int = -1) -> DenseArray:
    x = asarray(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> DenseArray:
    x = asarray(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> DenseArray:
    x, gain, bias = asarray(x), asarray(gain), asarray(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def adjoint(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + bias.data, (x, gain, bias), adjoint)
