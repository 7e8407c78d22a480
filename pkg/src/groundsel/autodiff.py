"""Reverse-mode automatic differentiation on dense numpy arrays.

A small tape machine: primitives run eagerly on numpy, and while a
ComputationRecord is active each call appends (output, inputs, backward_fn)
to the record.  backward() replays the record once in reverse and writes
gradients onto leaf tensors.  Everything is dense, two-dimensional unless
noted, and strictly finite: any primitive producing a non-finite value
raises immediately rather than letting NaNs propagate.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

SINGLE = np.float32
DOUBLE = np.float64

# Finite stand-in for -inf in attention masks.  exp(-1e30 - rowmax) underflows
# to exactly 0.0 in both float32 and float64, so masked columns get weight 0
# without ever putting an infinity on the tape.
MASK_VALUE = -1e30


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


class NonFiniteValue(FloatingPointError):
    """A primitive produced NaN or infinity."""


def _as_dtype(dtype):
    d = np.dtype(dtype)
    if d not in (np.dtype(SINGLE), np.dtype(DOUBLE)):
        raise ContractViolation(f"unsupported dtype {d}; use float32 or float64")
    return d.type


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{op} produced a non-finite value")


class Tensor:
    """Dense array with an optional gradient slot.

    data is always a numpy array of float32 or float64.  grad is either None
    or an array of the same shape/dtype, written by backward().
    """

    __slots__ = ("data", "grad", "_produced")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(SINGLE), np.dtype(DOUBLE)):
            arr = arr.astype(DOUBLE)
        if not np.isfinite(arr).all():
            raise NonFiniteValue("tensor initialised with non-finite data")
        self.data = arr
        self.grad = None
        self._produced = False  # True once some primitive emitted this tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class ComputationRecord:
    """Ordered list of primitive applications, replayable in reverse."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) onto .grad for every leaf in the record.

        loss must be a single-element tensor produced on this record.  Leaves
        reachable from loss get a fresh gradient array; leaves seen on the
        record but unreachable from loss get grad None.
        """
        if not isinstance(loss, Tensor):
            raise ContractViolation("backward target must be a Tensor")
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward target must be a single element, got shape {loss.shape}"
            )
        adjoint = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for out, inputs, bwd in reversed(self.nodes):
            g = adjoint.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            grads = bwd(g)
            for tensor, piece in zip(inputs, grads):
                if piece is None:
                    continue
                if piece.shape != tensor.data.shape:
                    raise ShapeMismatch(
                        f"backward piece {piece.shape} vs tensor {tensor.data.shape}"
                    )
                key = id(tensor)
                slot = adjoint.get(key)
                if slot is None:
                    # Own the buffer: backward fns may hand back views of g.
                    if piece is g or piece.base is not None:
                        piece = piece.copy()
                    adjoint[key] = piece
                    holders[key] = tensor
                else:
                    slot += piece
        seen_leaves = set()
        for out, inputs, _ in self.nodes:
            for tensor in inputs:
                if not tensor._produced and id(tensor) not in seen_leaves:
                    seen_leaves.add(id(tensor))
                    tensor.grad = None
        for key, tensor in holders.items():
            if not tensor._produced:
                grad = adjoint[key]
                _check_finite(grad, "backward")
                tensor.grad = grad


_ACTIVE: list[ComputationRecord] = []


@contextmanager
def record():
    """Context manager that records primitives onto a fresh ComputationRecord."""
    rec = ComputationRecord()
    _ACTIVE.append(rec)
    try:
        yield rec
    finally:
        _ACTIVE.pop()


def _emit(out, inputs, bwd):
    out._produced = True
    if _ACTIVE:
        _ACTIVE[-1].nodes.append((out, inputs, bwd))
    return out


def _wrap(data):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t._produced = False
    return t


def constant(data, dtype=SINGLE):
    """Tensor that participates in graphs but is not a leaf anyone trains."""
    return Tensor(data, dtype=dtype)


def _require_same(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ContractViolation(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    _require_same(a, b, "add")
    out = _wrap(a.data + b.data)
    _check_finite(out.data, "add")
    return _emit(out, (a, b), lambda g: (g, g))


def sub(a, b):
    _require_same(a, b, "sub")
    out = _wrap(a.data - b.data)
    _check_finite(out.data, "sub")
    return _emit(out, (a, b), lambda g: (g, -g))


def mul(a, b):
    _require_same(a, b, "mul")
    with np.errstate(over="ignore"):
        out = _wrap(a.data * b.data)
    _check_finite(out.data, "mul")
    ad, bd = a.data, b.data
    return _emit(out, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    _require_same(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _wrap(a.data / b.data)
    _check_finite(out.data, "div")
    ad, bd = a.data, b.data
    return _emit(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a, c):
    c = a.data.dtype.type(c)
    out = _wrap(a.data * c)
    _check_finite(out.data, "scale")
    return _emit(out, (a,), lambda g: (g * c,))


def shift(a, c):
    c = a.data.dtype.type(c)
    out = _wrap(a.data + c)
    _check_finite(out.data, "shift")
    return _emit(out, (a,), lambda g: (g,))


def neg(a):
    return scale(a, -1.0)


# --------------------------------------------------------------- nonlinear


def relu(a):
    out = _wrap(np.maximum(a.data, 0))
    mask = a.data > 0
    return _emit(out, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a):
    """Tanh approximation of the Gaussian error linear unit."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = _wrap(0.5 * x * (1.0 + t))
    _check_finite(out.data, "gelu")

    def bwd(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _emit(out, (a,), bwd)


def sigmoid(a):
    # Stable two-branch form: never exponentiates a large positive value.
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = _wrap(s)
    _check_finite(out.data, "sigmoid")
    return _emit(out, (a,), lambda g: (g * s * (1.0 - s),))


def absolute(a):
    out = _wrap(np.abs(a.data))
    sign = np.sign(a.data)
    return _emit(out, (a,), lambda g: (g * sign,))


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to the first argument."""
    _require_same(a, b, "minimum")
    take_a = a.data <= b.data
    out = _wrap(np.where(take_a, a.data, b.data))
    return _emit(out, (a, b), lambda g: (g * take_a, g * ~take_a))


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first argument."""
    _require_same(a, b, "maximum")
    take_a = a.data >= b.data
    out = _wrap(np.where(take_a, a.data, b.data))
    return _emit(out, (a, b), lambda g: (g * take_a, g * ~take_a))


# ------------------------------------------------------------------ linear


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ContractViolation("matmul: mixed dtypes")
    out = _wrap(a.data @ b.data)
    _check_finite(out.data, "matmul")
    ad, bd = a.data, b.data
    return _emit(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def affine(x, w, b):
    """x @ w + b with b broadcast across rows; b has shape (1, d_out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("affine expects rank-2 operands")
    if x.data.shape[1] != w.data.shape[0] or b.data.shape != (1, w.data.shape[1]):
        raise ShapeMismatch(
            f"affine: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    if not (x.data.dtype == w.data.dtype == b.data.dtype):
        raise ContractViolation("affine: mixed dtypes")
    out = _wrap(x.data @ w.data + b.data)
    _check_finite(out.data, "affine")
    xd, wd = x.data, w.data
    return _emit(
        out,
        (x, w, b),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0, keepdims=True)),
    )


def add_row(a, v):
    """Add row vector v (shape (1, n)) to every row of a (shape (m, n))."""
    if a.data.ndim != 2 or v.data.shape != (1, a.data.shape[1]):
        raise ShapeMismatch(f"add_row: {a.data.shape} + {v.data.shape}")
    if a.data.dtype != v.data.dtype:
        raise ContractViolation("add_row: mixed dtypes")
    out = _wrap(a.data + v.data)
    _check_finite(out.data, "add_row")
    return _emit(out, (a, v), lambda g: (g, g.sum(axis=0, keepdims=True)))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose expects rank 2")
    out = _wrap(np.ascontiguousarray(a.data.T))
    return _emit(out, (a,), lambda g: (g.T,))


# -------------------------------------------------------------- row-of-rows


def softmax_rows(a):
    """Row-wise softmax with max subtraction; each output row sums to 1."""
    if a.data.ndim != 2:
        raise ShapeMismatch("softmax_rows expects rank 2")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = _wrap(s)
    _check_finite(out.data, "softmax_rows")

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _emit(out, (a,), bwd)


def layernorm_rows(x, gamma, beta, eps=1e-5):
    """Per-row standardisation (population variance) followed by gamma/beta."""
    if x.data.ndim != 2:
        raise ShapeMismatch("layernorm_rows expects rank 2")
    d = x.data.shape[1]
    if gamma.data.shape != (1, d) or beta.data.shape != (1, d):
        raise ShapeMismatch(
            f"layernorm_rows: x {x.data.shape}, gamma {gamma.data.shape}, "
            f"beta {beta.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = _wrap(xhat * gamma.data + beta.data)
    _check_finite(out.data, "layernorm_rows")
    gd = gamma.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        w = g * gd
        dx = inv * (
            w
            - w.mean(axis=1, keepdims=True)
            - xhat * (w * xhat).mean(axis=1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return _emit(out, (x, gamma, beta), bwd)


# ----------------------------------------------------------- gather / slice


def gather_rows(a, indices):
    """Select rows of a by integer index; repeated indices accumulate grads."""
    if a.data.ndim != 2:
        raise ShapeMismatch("gather_rows expects rank 2")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("gather_rows indices must be one-dimensional")
    if idx.size == 0:
        raise ContractViolation("gather_rows with empty index list")
    if idx.min() < 0 or idx.max() >= a.data.shape[0]:
        raise ContractViolation(
            f"gather_rows index out of range for {a.data.shape[0]} rows"
        )
    out = _wrap(a.data[idx])
    shape = a.data.shape

    def bwd(g):
        da = np.zeros(shape, dtype=g.dtype)
        np.add.at(da, idx, g)
        return (da,)

    return _emit(out, (a,), bwd)


def slice_rows(a, start, stop):
    if a.data.ndim != 2:
        raise ShapeMismatch("slice_rows expects rank 2")
    if not (0 <= start < stop <= a.data.shape[0]):
        raise ContractViolation(
            f"slice_rows [{start}:{stop}] of {a.data.shape[0]} rows"
        )
    out = _wrap(a.data[start:stop].copy())
    shape = a.data.shape

    def bwd(g):
        da = np.zeros(shape, dtype=g.dtype)
        da[start:stop] = g
        return (da,)

    return _emit(out, (a,), bwd)


def slice_cols(a, start, stop):
    if a.data.ndim != 2:
        raise ShapeMismatch("slice_cols expects rank 2")
    if not (0 <= start < stop <= a.data.shape[1]):
        raise ContractViolation(
            f"slice_cols [{start}:{stop}] of {a.data.shape[1]} cols"
        )
    out = _wrap(a.data[:, start:stop].copy())
    shape = a.data.shape

    def bwd(g):
        da = np.zeros(shape, dtype=g.dtype)
        da[:, start:stop] = g
        return (da,)

    return _emit(out, (a,), bwd)


def concat_rows(parts):
    parts = list(parts)
    if not parts:
        raise ContractViolation("concat_rows of nothing")
    cols = parts[0].data.shape[1]
    dtype = parts[0].data.dtype
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != cols:
            raise ShapeMismatch("concat_rows: column counts differ")
        if p.data.dtype != dtype:
            raise ContractViolation("concat_rows: mixed dtypes")
    out = _wrap(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        pieces = []
        at = 0
        for n in sizes:
            pieces.append(g[at : at + n])
            at += n
        return tuple(pieces)

    return _emit(out, tuple(parts), bwd)


def concat_cols(parts):
    parts = list(parts)
    if not parts:
        raise ContractViolation("concat_cols of nothing")
    rows = parts[0].data.shape[0]
    dtype = parts[0].data.dtype
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeMismatch("concat_cols: row counts differ")
        if p.data.dtype != dtype:
            raise ContractViolation("concat_cols: mixed dtypes")
    out = _wrap(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.data.shape[1] for p in parts]

    def bwd(g):
        pieces = []
        at = 0
        for n in sizes:
            pieces.append(g[:, at : at + n])
            at += n
        return tuple(pieces)

    return _emit(out, tuple(parts), bwd)


# -------------------------------------------------------------- reductions


def sum_all(a):
    """Sum of all entries; result has shape (1, 1)."""
    out = _wrap(a.data.sum().reshape(1, 1))
    _check_finite(out.data, "sum_all")
    shape, dtype = a.data.shape, a.data.dtype
    return _emit(out, (a,), lambda g: (np.full(shape, g.reshape(-1)[0], dtype=dtype),))


def mean_all(a):
    """Mean of all entries; result has shape (1, 1)."""
    n = a.data.size
    out = _wrap(a.data.mean().reshape(1, 1))
    _check_finite(out.data, "mean_all")
    shape, dtype = a.data.shape, a.data.dtype

    def bwd(g):
        return (np.full(shape, g.reshape(-1)[0] / n, dtype=dtype),)

    return _emit(out, (a,), bwd)


def sum_rows(a):
    """Row sums of a (m, n) tensor; result has shape (m, 1)."""
    if a.data.ndim != 2:
        raise ShapeMismatch("sum_rows expects rank 2")
    out = _wrap(a.data.sum(axis=1, keepdims=True))
    _check_finite(out.data, "sum_rows")
    n = a.data.shape[1]
    return _emit(out, (a,), lambda g: (np.repeat(g, n, axis=1),))


def mean_rows(a):
    """Row means of a (m, n) tensor; result has shape (m, 1)."""
    if a.data.ndim != 2:
        raise ShapeMismatch("mean_rows expects rank 2")
    out = _wrap(a.data.mean(axis=1, keepdims=True))
    _check_finite(out.data, "mean_rows")
    n = a.data.shape[1]
    return _emit(out, (a,), lambda g: (np.repeat(g / n, n, axis=1),))


# ------------------------------------------------------- gradient checking


def finite_diff_check(f, params, h=1e-5):
    """Compare analytic gradients of f against central differences.

    f takes the parameter dict and returns a scalar Tensor; params maps names
    to leaf tensors.  Returns (max_rel_error, per_param dict).  The relative
    error for each coordinate is |analytic - numeric| divided by
    max(1e-5, |analytic| + |numeric|).  The floor swallows coordinates whose
    true gradient sits below the roundoff of the difference quotient itself
    (about 1e-10 at the default h for unit-scale losses); differencing cannot
    certify those, while any systematic error on them stays proportional to
    the gradient and still clears the floor.
    """
    if not params:
        raise ContractViolation("finite_diff_check with no parameters")
    with record() as rec:
        loss = f(params)
    if loss.data.size != 1:
        raise ContractViolation("finite_diff_check objective must be scalar")
    rec.backward(loss)
    analytic = {}
    for name, t in params.items():
        analytic[name] = (
            t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        )

    def value():
        return float(f(params).data.reshape(-1)[0])

    worst = 0.0
    per_param = {}
    for name, t in params.items():
        a_flat = analytic[name].reshape(-1)
        local = 0.0
        for i in range(t.data.size):
            keep = float(t.data.flat[i])
            t.data.flat[i] = keep + h
            up = value()
            t.data.flat[i] = keep - h
            down = value()
            t.data.flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(1e-5, abs(a) + abs(numeric))
            if err > local:
                local = err
        per_param[name] = local
        if local > worst:
            worst = local
    return worst, per_param
