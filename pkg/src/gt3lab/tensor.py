"""Dense 64-bit matrices with tape-based reverse-mode differentiation.

Every value is a 2-D matrix; scalars are 1x1. Operations build a DAG of
DiffNodes, and backward() walks it in reverse topological order, adding
gradient contributions whenever a node feeds several consumers. The graph
is rebuilt on every forward pass, so there is no gradient-zeroing step.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operand values are outside the mathematical domain of the op."""


class NonFiniteError(ValueError):
    """A matrix with NaN or Inf entries was produced."""


class DegenerateRowError(ValueError):
    """A row with near-zero norm was normalized in strict mode."""


class DenseMatrix:
    """Immutable rows x cols matrix of float64, row-major.

    All entries must be finite on construction; this is what surfaces
    numerical blow-ups (overflow to inf, 0/0) as errors instead of
    silently propagating them through a training run.
    """

    __slots__ = ("_data",)

    def __init__(self, rows: int, cols: int, values) -> None:
        try:
            arr = np.array(values, dtype=np.float64).reshape(rows, cols)
        except ValueError as exc:
            raise ShapeError(f"cannot shape values into {rows}x{cols}: {exc}") from None
        _check_finite(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "_data", arr)

    @classmethod
    def from_array(cls, arr) -> "DenseMatrix":
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got ndim={a.ndim}")
        return cls(a.shape[0], a.shape[1], a)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "DenseMatrix":
        return cls(rows, cols, np.zeros((rows, cols)))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "DenseMatrix":
        return cls(rows, cols, np.ones((rows, cols)))

    @classmethod
    def eye(cls, n: int) -> "DenseMatrix":
        return cls(n, n, np.eye(n))

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the stored values."""
        return self._data

    def item(self) -> float:
        if self._data.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 matrix, got {self._data.shape}")
        return float(self._data[0, 0])

    def tolist(self) -> list[list[float]]:
        return self._data.tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseMatrix):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __hash__(self):
        return hash((self._data.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"DenseMatrix({self.rows}x{self.cols})"


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError("matrix contains NaN or Inf entries")


class DiffNode:
    """One node of the differentiation tape.

    value is a DenseMatrix, parents are the operand nodes, and _backward
    (set by the op that created the node) scatters the node's gradient
    into its parents' accumulators.
    """

    __slots__ = ("value", "op", "parents", "_grad", "_backward")

    def __init__(self, value: DenseMatrix, op: str = "leaf", parents: tuple = ()) -> None:
        self.value = value
        self.op = op
        self.parents = parents
        self._grad: np.ndarray | None = None
        self._backward = None

    @property
    def grad(self) -> DenseMatrix | None:
        """Accumulated gradient after backward(), same shape as value."""
        if self._grad is None:
            return None
        return DenseMatrix.from_array(self._grad)

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.value.array)
        self._grad += g

    def __repr__(self) -> str:
        return f"DiffNode(op={self.op!r}, shape={self.value.shape})"


def leaf(m: DenseMatrix) -> DiffNode:
    """Trainable input node."""
    return DiffNode(m, op="leaf")


def constant(m: DenseMatrix) -> DiffNode:
    """Non-trainable input node; still receives a gradient accumulator."""
    return DiffNode(m, op="constant")


def _node(values: np.ndarray, op: str, parents: tuple, backward_fn) -> DiffNode:
    out = DiffNode(DenseMatrix.from_array(values), op=op, parents=parents)
    out._backward = backward_fn
    return out


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    av, bv = a.value.array, b.value.array
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    out_values = av @ bv

    def backward(g: np.ndarray) -> None:
        a._accumulate(g @ bv.T)
        b._accumulate(av.T @ g)

    return _node(out_values, "matmul", (a, b), backward)


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    """Elementwise sum; b may be a 1 x cols row broadcast over a's rows."""
    av, bv = a.value.array, b.value.array
    broadcast = bv.shape[0] == 1 and av.shape[0] != 1 and bv.shape[1] == av.shape[1]
    if av.shape != bv.shape and not broadcast:
        raise ShapeError(f"add: shapes {av.shape} and {bv.shape} do not align")
    out_values = av + bv

    def backward(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(g.sum(axis=0, keepdims=True) if broadcast else g)

    return _node(out_values, "add", (a, b), backward)


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    av, bv = a.value.array, b.value.array
    if av.shape != bv.shape:
        raise ShapeError(f"sub: shapes {av.shape} and {bv.shape} do not match")
    out_values = av - bv

    def backward(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(-g)

    return _node(out_values, "sub", (a, b), backward)


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    av, bv = a.value.array, b.value.array
    if av.shape != bv.shape:
        raise ShapeError(f"mul: shapes {av.shape} and {bv.shape} do not match")
    out_values = av * bv

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * bv)
        b._accumulate(g * av)

    return _node(out_values, "mul", (a, b), backward)


def elementwise(a: DiffNode, b: DiffNode, kind: str) -> DiffNode:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ValueError(f"elementwise: unknown kind {kind!r}")
    return ops[kind](a, b)


def scale(a: DiffNode, c: float) -> DiffNode:
    c = float(c)
    out_values = a.value.array * c

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * c)

    return _node(out_values, "scale", (a,), backward)


def transpose(a: DiffNode) -> DiffNode:
    out_values = a.value.array.T

    def backward(g: np.ndarray) -> None:
        a._accumulate(g.T)

    return _node(out_values, "transpose", (a,), backward)


def relu(a: DiffNode) -> DiffNode:
    av = a.value.array
    out_values = np.maximum(av, 0.0)
    mask = av > 0.0

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * mask)

    return _node(out_values, "relu", (a,), backward)


def sigmoid(a: DiffNode) -> DiffNode:
    av = a.value.array
    out_values = np.empty_like(av)
    pos = av >= 0
    out_values[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out_values[~pos] = ez / (1.0 + ez)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * out_values * (1.0 - out_values))

    return _node(out_values, "sigmoid", (a,), backward)


def log(a: DiffNode) -> DiffNode:
    av = a.value.array
    if (av <= 0.0).any():
        raise DomainError("log: all entries must be strictly positive")
    out_values = np.log(av)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g / av)

    return _node(out_values, "log", (a,), backward)


def exp(a: DiffNode) -> DiffNode:
    with np.errstate(over="ignore"):
        out_values = np.exp(a.value.array)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * out_values)

    return _node(out_values, "exp", (a,), backward)


def clip(a: DiffNode, lo: float, hi: float) -> DiffNode:
    """Clamp entries into [lo, hi]; gradient is zero where clamping bit."""
    av = a.value.array
    out_values = np.clip(av, lo, hi)
    mask = (av > lo) & (av < hi)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * mask)

    return _node(out_values, "clip", (a,), backward)


def row_softmax(a: DiffNode) -> DiffNode:
    av = a.value.array
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        gs = (g * out_values).sum(axis=1, keepdims=True)
        a._accumulate(out_values * (g - gs))

    return _node(out_values, "row_softmax", (a,), backward)


def reduce(a: DiffNode, kind: str) -> DiffNode:
    ops = {
        "sum_rows": sum_rows,
        "mean_rows": mean_rows,
        "max_rows": max_rows,
        "sum_all": sum_all,
    }
    if kind not in ops:
        raise ValueError(f"reduce: unknown kind {kind!r}")
    return ops[kind](a)


def sum_rows(a: DiffNode) -> DiffNode:
    av = a.value.array
    out_values = av.sum(axis=0, keepdims=True)

    def backward(g: np.ndarray) -> None:
        a._accumulate(np.broadcast_to(g, av.shape).copy())

    return _node(out_values, "sum_rows", (a,), backward)


def mean_rows(a: DiffNode) -> DiffNode:
    av = a.value.array
    n = av.shape[0]
    out_values = av.mean(axis=0, keepdims=True)

    def backward(g: np.ndarray) -> None:
        a._accumulate(np.broadcast_to(g / n, av.shape).copy())

    return _node(out_values, "mean_rows", (a,), backward)


def max_rows(a: DiffNode) -> DiffNode:
    """Column-wise max over rows; gradient flows to the first argmax row."""
    av = a.value.array
    out_values = av.max(axis=0, keepdims=True)
    argmax = av.argmax(axis=0)

    def backward(g: np.ndarray) -> None:
        d = np.zeros_like(av)
        d[argmax, np.arange(av.shape[1])] = g[0]
        a._accumulate(d)

    return _node(out_values, "max_rows", (a,), backward)


def sum_all(a: DiffNode) -> DiffNode:
    av = a.value.array
    out_values = np.array([[av.sum()]])

    def backward(g: np.ndarray) -> None:
        a._accumulate(np.full_like(av, g[0, 0]))

    return _node(out_values, "sum_all", (a,), backward)


_ROW_NORM_FLOOR = 1e-12


def row_l2_normalize(a: DiffNode, strict: bool = False) -> DiffNode:
    """Scale each row to unit L2 norm.

    Non-strict mode guards the norm with a 1e-12 floor under the square
    root so transiently tiny rows do not blow up training; strict mode
    raises DegenerateRowError instead, naming the first offending row.
    """
    av = a.value.array
    sq = (av * av).sum(axis=1, keepdims=True)
    if strict:
        bad = np.flatnonzero(np.sqrt(sq[:, 0]) < _ROW_NORM_FLOOR)
        if bad.size:
            raise DegenerateRowError(f"row {bad[0]} has near-zero norm")
    norms = np.sqrt(sq + _ROW_NORM_FLOOR)
    out_values = av / norms

    def backward(g: np.ndarray) -> None:
        dot = (g * av).sum(axis=1, keepdims=True)
        a._accumulate(g / norms - av * (dot / norms**3))

    return _node(out_values, "row_l2_normalize", (a,), backward)


def row_layernorm(a: DiffNode, eps: float = 1e-5) -> DiffNode:
    """Per-row standardization (x - mean) / sqrt(var + eps), no affine part."""
    av = a.value.array
    mu = av.mean(axis=1, keepdims=True)
    var = ((av - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (av - mu) * inv

    def backward(g: np.ndarray) -> None:
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        a._accumulate(inv * (g - gm - y * gy))

    return _node(y, "row_layernorm", (a,), backward)


def frobenius_sq(a: DiffNode) -> DiffNode:
    av = a.value.array
    out_values = np.array([[(av * av).sum()]])

    def backward(g: np.ndarray) -> None:
        a._accumulate(2.0 * g[0, 0] * av)

    return _node(out_values, "frobenius_sq", (a,), backward)


def concat_rows(nodes: list[DiffNode]) -> DiffNode:
    """Stack 1-or-more matrices with equal column counts along rows."""
    if not nodes:
        raise ShapeError("concat_rows: need at least one node")
    cols = nodes[0].value.cols
    for n in nodes:
        if n.value.cols != cols:
            raise ShapeError("concat_rows: column counts differ")
    out_values = np.concatenate([n.value.array for n in nodes], axis=0)
    splits = np.cumsum([n.value.rows for n in nodes])[:-1]

    def backward(g: np.ndarray) -> None:
        for n, part in zip(nodes, np.split(g, splits, axis=0)):
            n._accumulate(part)

    return _node(out_values, "concat_rows", tuple(nodes), backward)


def backward(root: DiffNode) -> None:
    """Reverse-mode sweep from a 1x1 scalar root.

    After the call every node reachable from the root holds d(root)/d(node)
    in .grad, with contributions from multiple consumers summed.
    """
    if root.value.shape != (1, 1):
        raise ShapeError(f"backward: root must be 1x1, got {root.value.shape}")

    order: list[DiffNode] = []
    seen: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        if node._grad is None:
            node._grad = np.zeros_like(node.value.array)
    root._grad = np.ones((1, 1))

    for node in reversed(order):
        if node._backward is not None:
            node._backward(node._grad)
