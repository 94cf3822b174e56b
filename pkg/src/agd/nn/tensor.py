"""Reverse-mode autodiff over 2-D float64 matrices.

A ``Tensor`` wraps a row-major ``(rows, cols)`` float64 array.  Operations on
tensors record an implicit tape (parent links plus backward closures); calling
``backward()`` on a scalar-shaped tensor propagates exact reverse-mode
gradients into every leaf created with ``requires_grad=True``.  Wrapping raw
arrays is cheap, so model code passes ``np.ndarray`` and ``Tensor`` values
interchangeably.

Recording is skipped entirely inside ``no_grad()`` or when no operand requires
gradients, which makes the same forward code usable for both training and
plain (sampler-speed) evaluation.

Only the handful of primitives the rest of the package needs are implemented:
elementwise arithmetic with row/column broadcasting, matmul, activations,
row-wise softmax, column concatenation, reductions, and embedding-row gather.
"""

from contextlib import contextmanager

import numpy as np

from agd.errors import DimensionError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Tensor:
    """2-D float64 value plus an optional gradient tape node."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = _as_array(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a (1, 1)-shaped scalar."""
        if self.value.shape != (1, 1):
            raise DimensionError("backward() starts from a scalar-shaped tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((1, 1))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: tuple, backward) -> Tensor:
    record = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = record
    out._parents = parents if record else ()
    out._backward = backward if record else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, c = (a, b) if isinstance(a, Tensor) else (as_tensor(b), a)
        t = as_tensor(t)
        value = t.value + float(c)

        def backward(g, t=t):
            t._accum(g)

        return _node(value, (t,), backward)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "add")
    value = a.value + b.value

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.value.shape))

    return _node(value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "sub")
    value = a.value - b.value

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.value.shape))

    return _node(value, (a, b), backward)


def mul(a, b) -> Tensor:
    if isinstance(a, (int, float)):
        return scale(as_tensor(b), float(a))
    if isinstance(b, (int, float)):
        return scale(as_tensor(a), float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "mul")
    value = a.value * b.value

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.value.shape))

    return _node(value, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    value = a.value * c

    def backward(g, a=a, c=c):
        a._accum(g * c)

    return _node(value, (a,), backward)


def matmul(a, b) -> Tensor:
    """Standard matrix product; raises DimensionError on inner-shape mismatch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: ({a.rows}x{a.cols}) @ ({b.rows}x{b.cols})")
    value = a.value @ b.value

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accum(g @ b.value.T)
        if b.requires_grad:
            b._accum(a.value.T @ g)

    return _node(value, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    value = np.maximum(a.value, 0.0)

    def backward(g, a=a):
        a._accum(g * (a.value > 0.0))

    return _node(value, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.value))

    def backward(g, a=a, s=s):
        a._accum(g * s * (1.0 - s))

    return _node(s, (a,), backward)


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    value = a.value * s

    def backward(g, a=a, s=s):
        a._accum(g * s * (1.0 + a.value * (1.0 - s)))

    return _node(value, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    a = as_tensor(a)
    value = np.abs(a.value)

    def backward(g, a=a):
        a._accum(g * np.sign(a.value))

    return _node(value, (a,), backward)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    value = a.value * a.value

    def backward(g, a=a):
        a._accum(2.0 * g * a.value)

    return _node(value, (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along each row; rows of the result sum to 1."""
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g, a=a, y=y):
        inner = (g * y).sum(axis=1, keepdims=True)
        a._accum((g - inner) * y)

    return _node(y, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    value = np.array([[a.value.sum()]])

    def backward(g, a=a):
        a._accum(np.full(a.value.shape, g[0, 0]))

    return _node(value, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    value = np.array([[a.value.sum() / n]])

    def backward(g, a=a, n=n):
        a._accum(np.full(a.value.shape, g[0, 0] / n))

    return _node(value, (a,), backward)


def sum_rows(a: Tensor) -> Tensor:
    """Sum over rows: (m, n) -> (1, n)."""
    a = as_tensor(a)
    value = a.value.sum(axis=0, keepdims=True)

    def backward(g, a=a):
        a._accum(np.broadcast_to(g, a.value.shape))

    return _node(value, (a,), backward)


def sum_cols(a: Tensor) -> Tensor:
    """Sum over columns: (m, n) -> (m, 1)."""
    a = as_tensor(a)
    value = a.value.sum(axis=1, keepdims=True)

    def backward(g, a=a):
        a._accum(np.broadcast_to(g, a.value.shape))

    return _node(value, (a,), backward)


def concat_cols(parts: list) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise DimensionError("concat_cols: row counts differ")
    value = np.concatenate([p.value for p in parts], axis=1)
    widths = [p.cols for p in parts]

    def backward(g, parts=parts, widths=widths):
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accum(g[:, offset : offset + w])
            offset += w

    return _node(value, tuple(parts), backward)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of an embedding table: out[i] = table[indices[i]]."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise DimensionError("gather_rows: index out of range")
    value = table.value[idx]

    def backward(g, table=table, idx=idx):
        buf = np.zeros(table.value.shape)
        np.add.at(buf, idx, g)
        table._accum(buf)

    return _node(value, (table,), backward)


def softmax_attention(q, k, v) -> Tensor:
    """Single-head attention Softmax(Q K^T / sqrt(d)) V.

    Every output row is a convex combination of the rows of V.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.cols != k.cols:
        raise DimensionError(f"attention: Q cols {q.cols} != K cols {k.cols}")
    if k.rows != v.rows:
        raise DimensionError(f"attention: K rows {k.rows} != V rows {v.rows}")
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.cols))
    return matmul(row_softmax(scores), v)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    value = np.ascontiguousarray(a.value.T)

    def backward(g, a=a):
        a._accum(g.T)

    return _node(value, (a,), backward)


ACTIVATIONS = {"relu": relu, "silu": silu, "identity": lambda t: as_tensor(t)}
