"""Minimal dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every primitive applied to tensors that live on it.
Leaves are created with :meth:`Tape.leaf`; anything built from plain arrays
(or from :func:`detach`) is a constant and never receives a gradient.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    loss = mean(relu(x @ w))
    grads = tape.backward(loss)
    grads[w]            # same shape as w

All values are float64. Any forward op that produces NaN/Inf raises
:class:`~attrda.errors.NumericError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class _Node:
    __slots__ = ("parents", "backward", "shape")

    def __init__(self, parents: tuple[int, ...], backward: BackwardFn | None, shape):
        self.parents = parents
        self.backward = backward
        self.shape = shape


class GradMap(dict):
    """Gradients of one backward pass, keyed by tape node id.

    Indexing also accepts the leaf :class:`Tensor` itself.
    """

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__contains__(key)


class Tape:
    """Ordered record of primitive operations.

    Node ids are assigned in creation order, so every op's inputs precede it
    and reverse id order is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[int] = []
        self._leaf_set: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        arr = np.array(data, dtype=np.float64)  # own copy
        if not np.isfinite(arr).all():
            raise NumericError("non-finite value in leaf tensor")
        node = len(self.nodes)
        self.nodes.append(_Node((), None, arr.shape))
        self.leaves.append(node)
        self._leaf_set.add(node)
        return Tensor(arr, self, node)

    def _record(self, out: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        node = len(self.nodes)
        ids = tuple(-1 if p.tape is None else p.node for p in parents)
        self.nodes.append(_Node(ids, backward, out.shape))
        return Tensor(out, self, node)

    def backward(self, loss: Tensor) -> GradMap:
        """Gradients of scalar ``loss`` w.r.t. every leaf on this tape.

        Leaves the loss does not depend on get an all-zero buffer.
        Accumulation is sequential in node order, so repeated calls are
        bit-identical.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ContractError("backward requires a scalar loss tensor")
        if loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")

        grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
        for nid in range(loss.node, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid < 0 or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = np.array(pg, dtype=np.float64)
            if nid not in self._leaf_set:
                del grads[nid]

        out = GradMap()
        for lid in self.leaves:
            out[lid] = grads.get(lid, np.zeros(self.nodes[lid].shape))
        return out


def constant(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64))


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape (stop-gradient)."""
    return Tensor(_t(x).data)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> "Tape | None":
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands live on different tapes")
            tape = x.tape
    return tape


def _finish(name: str, out: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{name} produced a non-finite value")
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(out)
    return tape._record(out, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "add")
    return _finish(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "sub")
    return _finish(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "mul")
    return _finish(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = _t(x)
    c = float(c)
    return _finish("scale", x.data * c, (x,), lambda g: (g * c,))


def log(x) -> Tensor:
    x = _t(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _finish("log", out, (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = _t(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _finish("exp", out, (x,), lambda g: (g * out,))


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp_min(x, eps: float) -> Tensor:
    """max(x, eps); gradient passes only where x > eps."""
    x = _t(x)
    mask = x.data > eps
    return _finish("clamp_min", np.where(mask, x.data, eps), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra, reductions, indexing


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _finish(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _t(x)
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _finish("sum", np.asarray(out), (x,), back)


def mean(x, axis: int | None = None) -> Tensor:
    x = _t(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum(x, axis), 1.0 / n)


def gather(x, index) -> Tensor:
    """Pick one entry per row: ``out[i] = x[i, index[i]]`` for 2-D ``x``."""
    x = _t(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather: x {x.shape} incompatible with index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError("gather: index out of range")
    rows = np.arange(x.shape[0])

    def back(g):
        out = np.zeros(x.shape)
        out[rows, idx] = g
        return (out,)

    return _finish("gather", x.data[rows, idx], (x,), back)


def take_rows(x, rows) -> Tensor:
    """Select rows ``x[rows]`` (rows may repeat)."""
    x = _t(x)
    r = np.asarray(rows, dtype=np.int64)

    def back(g):
        out = np.zeros(x.shape)
        np.add.at(out, r, g)
        return (out,)

    return _finish("take_rows", x.data[r], (x,), back)


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"one_hot: label outside [0, {k})")
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def concatenate(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [_t(x) for x in xs]
    if not xs:
        raise ShapeError("concatenate of nothing")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concatenate: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _finish("concatenate", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``x / temperature`` along ``axis``, max-subtracted."""
    x = _t(x)
    if not temperature > 0:
        raise ContractError("softmax temperature must be positive")
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax of non-finite logits")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot) / temperature,)

    return _finish("softmax", p, (x,), back)


def log_softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    x = _t(x)
    if not temperature > 0:
        raise ContractError("log_softmax temperature must be positive")
    if not np.isfinite(x.data).all():
        raise NumericError("log_softmax of non-finite logits")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _finish("log_softmax", out, (x,), back)
