"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap float64 numpy buffers.  Operations executed while a Tape is
active are recorded and replayed in reverse by ``Tape.backward``.  The
operation set is deliberately small: affine layers, the bounded-residual
nonlinearities, the soft-histogram machinery and the loss reductions are
all expressible with what is here.

Broadcasting is restricted to scalar-with-tensor and equal shapes; the
row-vector cases needed by affine layers and column standardization have
dedicated primitives (``add_rowvec``) so shape bugs fail loudly instead
of silently broadcasting.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    """Operand shapes incompatible with the operation."""


class TapeStateError(AutodiffError):
    """Tape used in an invalid state (e.g. backward called twice)."""


class Tensor:
    """A float64 array with an optional gradient buffer.

    Values are treated as immutable after creation; only ``grad`` is
    mutated (by ``Tape.backward`` and ``zero_grad``).
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def grad_array(self) -> np.ndarray:
        """Gradient buffer, materializing zeros for untouched tensors."""
        if self.grad is None:
            return np.zeros_like(self.values)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed operations.

    One tape per forward pass; ``backward`` consumes it.  A consumed tape
    refuses a second backward, forcing a fresh forward per optimization
    step.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs, vjp):
        self._records.append((out, tuple(inputs), vjp))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(t) onto ``t.grad`` for every reachable
        requires_grad tensor."""
        if self._consumed:
            raise TapeStateError("backward called twice on a consumed tape")
        if loss.values.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self._records):
            g = pending.pop(id(out), None)
            tensors.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = np.array(gi, dtype=np.float64, copy=True)
                    tensors[key] = t
        # whatever is left was never produced by a recorded op: leaves
        for key, g in pending.items():
            t = tensors[key]
            if not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g.reshape(t.values.shape)
            else:
                t.grad = t.grad + g.reshape(t.values.shape)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def make_op(values, inputs, vjp) -> Tensor:
    """Create the output tensor of a primitive and record it if needed."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=req)
    tape = active_tape()
    if tape is not None and req:
        tape.record(out, inputs, vjp)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    """Allowed: equal shapes, or one side a scalar (size-1) tensor."""
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to a (possibly scalar) operand shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(a.values + b.values, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op(a.values - b.values, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return make_op(a.values * b.values, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")

    def vjp(g):
        ga = _unbroadcast(g / b.values, a.shape)
        gb = _unbroadcast(-g * a.values / (b.values * b.values), b.shape)
        return ga, gb

    return make_op(a.values / b.values, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return make_op(a.values * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return make_op(a.values + float(c), (a,), lambda g: (g,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.values)
    return make_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid_values(a.values)
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def square(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(a.values * a.values, (a,), lambda g: (g * 2.0 * a.values,))


def sqrt_clamped(a) -> Tensor:
    """sqrt(max(a, 0)) with gradient defined as 0 where a <= 0."""
    a = _as_tensor(a)
    y = np.sqrt(np.maximum(a.values, 0.0))

    def vjp(g):
        safe = np.where(y > 0.0, y, 1.0)
        return (np.where(a.values > 0.0, g * 0.5 / safe, 0.0),)

    return make_op(y, (a,), vjp)


def clamp_min(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    mask = a.values > c
    return make_op(np.maximum(a.values, c), (a,), lambda g: (g * mask,))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(np.cos(a.values), (a,), lambda g: (-g * np.sin(a.values),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(np.sin(a.values), (a,), lambda g: (g * np.cos(a.values),))


def cosh(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(np.cosh(a.values), (a,), lambda g: (g * np.sinh(a.values),))


def wrap_angle(a) -> Tensor:
    """Wrap to (-pi, pi]; the shift is locally constant so the gradient
    passes through unchanged."""
    a = _as_tensor(a)
    y = np.pi - np.mod(np.pi - a.values, 2.0 * np.pi)
    return make_op(y, (a,), lambda g: (g,))


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(np.sum(a.values), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    return make_op(
        np.mean(a.values), (a,), lambda g: (np.broadcast_to(g / n, a.shape),)
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul requires 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape}")

    def vjp(g):
        return g @ b.values.T, a.values.T @ g

    return make_op(a.values @ b.values, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError("transpose requires a 2-D operand")
    return make_op(a.values.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    return make_op(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def add_rowvec(a, b) -> Tensor:
    """a: (N, M) plus a row vector b of shape (M,) or (1, M)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2:
        raise ShapeError("add_rowvec: first operand must be 2-D")
    brow = b.values.reshape(-1)
    if brow.shape[0] != a.shape[1]:
        raise ShapeError(f"add_rowvec: {a.shape} with row {b.shape}")

    def vjp(g):
        return g, g.sum(axis=0).reshape(b.shape)

    return make_op(a.values + brow[None, :], (a, b), vjp)


def gather_cols(a, idx) -> Tensor:
    """Select columns ``idx`` of an (N, d) tensor -> (N, k)."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError("gather_cols: operand must be 2-D")
    idx = tuple(int(i) for i in idx)
    d = a.shape[1]
    for i in idx:
        if not 0 <= i < d:
            raise ShapeError(f"gather_cols: column {i} out of range for d={d}")

    def vjp(g):
        full = np.zeros_like(a.values)
        for k, i in enumerate(idx):
            full[:, i] += g[:, k]
        return (full,)

    return make_op(a.values[:, idx].copy(), (a,), vjp)


def col(a, j: int) -> Tensor:
    """Column j of an (N, d) tensor as a 1-D vector."""
    return reshape(gather_cols(a, (j,)), (-1,))


def take(a, idx) -> Tensor:
    """Select entries ``idx`` of a 1-D tensor; gradient scatter-adds."""
    a = _as_tensor(a)
    if a.values.ndim != 1:
        raise ShapeError("take: operand must be 1-D")
    idx = np.asarray(idx)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)

    def vjp(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(a.values[idx].copy(), (a,), vjp)


def stack_cols(columns) -> Tensor:
    """Stack 1-D vectors of common length N into an (N, k) tensor."""
    columns = [_as_tensor(c) for c in columns]
    if not columns:
        raise ShapeError("stack_cols: no columns")
    n = columns[0].size
    for c in columns:
        if c.values.ndim != 1 or c.size != n:
            raise ShapeError("stack_cols: columns must be 1-D of equal length")

    def vjp(g):
        return tuple(g[:, k] for k in range(len(columns)))

    return make_op(np.stack([c.values for c in columns], axis=1), columns, vjp)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy from logits; numerically stable.

    mean(softplus(z) - y*z); gradient (sigmoid(z) - y) / N.
    """
    z = _as_tensor(logits)
    y = _as_tensor(labels)
    if z.shape != y.shape:
        raise ShapeError(f"bce_with_logits: {z.shape} vs {y.shape}")
    zv = z.values
    softplus = np.where(zv > 0, zv + np.log1p(np.exp(-np.abs(zv))), np.log1p(np.exp(zv)))
    val = np.mean(softplus - y.values * zv)
    n = z.size

    def vjp(g):
        return (g * (_sigmoid_values(zv) - y.values) / n, None)

    return make_op(val, (z, y), vjp)


def elementwise(op: str, *args) -> Tensor:
    """Dispatch table for the named elementwise operations."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "square": square,
        "scale": scale,
        "sum": tsum,
        "mean": tmean,
    }
    if op not in table:
        raise AutodiffError(f"unknown elementwise op {op!r}")
    return table[op](*args)


def backward(loss: Tensor):
    """Run backward on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeStateError("backward requires an active tape")
    tape.backward(loss)
