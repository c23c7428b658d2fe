"""Reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient.  Operations record
their inputs and a backward closure on a dynamic graph; ``backward(loss)``
walks the graph once in reverse topological order, accumulating gradients
additively across fan-out.  Gradients persist on leaves until explicitly
zeroed by the caller (the optimizer), never implicitly.

Every op validates shapes up front (raising ``ShapeError`` with both shapes)
and checks its result for NaN/Inf (raising ``NumericalError`` with the op
name and operand shapes).  The finite check runs in one of three modes,
selected by ``VOXIMAGE_FINITE_CHECK``: ``full`` (default), ``sample``
(strided spot check), or ``off``.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError, ShapeError
from . import kernels

_grad_enabled = True
_finite_mode = os.environ.get("VOXIMAGE_FINITE_CHECK", "full").lower()
if _finite_mode not in ("full", "sample", "off"):
    _finite_mode = "full"


def set_finite_check(mode: str) -> None:
    """Override the finite-check mode: 'full', 'sample', or 'off'."""
    global _finite_mode
    if mode not in ("full", "sample", "off"):
        raise ValueError(f"unknown finite-check mode {mode!r}")
    _finite_mode = mode


def _check_finite(data: np.ndarray, op: str, parents: Sequence["Tensor"]) -> None:
    if _finite_mode == "off":
        return
    if _finite_mode == "sample" and data.size > 256:
        flat = data.reshape(-1)
        view = flat[:: max(1, data.size // 256)]
        ok = bool(np.isfinite(view).all())
    else:
        ok = bool(np.isfinite(data).all())
    if not ok:
        shapes = [tuple(p.data.shape) for p in parents]
        raise NumericalError(f"non-finite result from op '{op}', operand shapes {shapes}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Float64 array with optional gradient and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], tuple] | None = None
        self._op: str | None = None

    # -- construction -------------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], op: str,
                 bwd: Callable[[np.ndarray], tuple]) -> "Tensor":
        _check_finite(data, op, parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag}, op={self._op})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Deterministic reverse-usable topological order of the graph under root."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    Leaf gradients accumulate across calls; intermediate tensors are fresh
    per forward pass so their grads are effectively per-pass.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    order = topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._bwd is None:
            continue
        parent_grads = node._bwd(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = pending.get(id(parent))
            pending[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of the operand it belongs to."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_data(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_data(a, b, "add")
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(data, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_data(a, b, "sub")
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._from_op(data, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_data(a, b, "mul")
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(data, (a, b), "mul", bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_data(a, b, "div")
    data = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._from_op(data, (a, b), "div", bwd)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return Tensor._from_op(-a.data, (a,), "neg", bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**p for a constant scalar exponent."""
    a = as_tensor(a)
    p = float(exponent)
    data = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._from_op(data, (a,), f"pow{p:g}", bwd)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / data,)

    return Tensor._from_op(data, (a,), "sqrt", bwd)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return Tensor._from_op(data, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return Tensor._from_op(data, (a,), "log", bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._from_op(np.asarray(data), (a,), "sum", bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from None

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return Tensor._from_op(np.ascontiguousarray(data), (a,), "reshape", bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.data.shape}")
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor._from_op(data, (a,), "transpose", bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tensors, "concat", bwd)


# ---------------------------------------------------------------------------
# kernel-backed ops (softmax family, layernorm, gelu)
# ---------------------------------------------------------------------------

def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    if a.data.ndim < 1 or a.data.shape[-1] == 0:
        raise ShapeError(f"softmax: invalid shape {a.data.shape}")
    x2 = _rows(a.data)
    y2 = kernels.softmax_rows(x2)

    def bwd(g):
        g2 = _rows(g)
        return (kernels.softmax_rows_bwd(y2, g2).reshape(a.data.shape),)

    return Tensor._from_op(y2.reshape(a.data.shape), (a,), "softmax", bwd)


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis; result drops that axis."""
    a = as_tensor(a)
    x2 = _rows(a.data)
    lse = kernels.logsumexp_rows(x2)
    out_shape = a.data.shape[:-1]

    def bwd(g):
        g1 = np.ascontiguousarray(g.reshape(-1))
        return (kernels.logsumexp_rows_bwd(x2, lse, g1).reshape(a.data.shape),)

    return Tensor._from_op(lse.reshape(out_shape), (a,), "logsumexp", bwd)


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with learned scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layernorm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d} of {a.data.shape}")
    x2 = _rows(a.data)
    y2, mu, rstd = kernels.layernorm_rows(x2, gamma.data, beta.data, eps)

    def bwd(g):
        g2 = _rows(g)
        dx, dgamma, dbeta = kernels.layernorm_rows_bwd(x2, gamma.data, mu, rstd, g2)
        return dx.reshape(a.data.shape), dgamma, dbeta

    return Tensor._from_op(y2.reshape(a.data.shape), (a, gamma, beta), "layernorm", bwd)


def gelu(a: Tensor) -> Tensor:
    """Elementwise GELU (tanh form)."""
    a = as_tensor(a)
    x = np.ascontiguousarray(a.data)
    data = kernels.gelu(x)

    def bwd(g):
        return (kernels.gelu_bwd(x, np.ascontiguousarray(g)),)

    return Tensor._from_op(data, (a,), "gelu", bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return da, db

    return Tensor._from_op(data, (a, b), "matmul", bwd)


# ---------------------------------------------------------------------------
# gather / scatter ops for token masking and embeddings
# ---------------------------------------------------------------------------

def _check_index(idx: np.ndarray, bound: int, op: str) -> np.ndarray:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"{op}: index dtype must be integer, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise ShapeError(f"{op}: index out of range for axis size {bound}")
    return idx.astype(np.int64, copy=False)


def take_tokens(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather tokens: a [B, P, D], idx [B, K] -> [B, K, D]."""
    a = as_tensor(a)
    if a.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"take_tokens: got tokens {a.data.shape}, idx {idx.shape}")
    idx = _check_index(idx, a.data.shape[1], "take_tokens")
    bidx = np.arange(a.data.shape[0])[:, None]
    data = a.data[bidx, idx]

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (bidx, idx), g)
        return (da,)

    return Tensor._from_op(np.ascontiguousarray(data), (a,), "take_tokens", bwd)


def scatter_tokens(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Place rows [B, K, D] into base [B, P, D] at positions idx [B, K].

    Positions must be unique within each batch row; scattered positions
    replace the base values there.
    """
    base, rows = as_tensor(base), as_tensor(rows)
    if base.data.ndim != 3 or rows.data.ndim != 3 or idx.ndim != 2:
        raise ShapeError(
            f"scatter_tokens: got base {base.data.shape}, rows {rows.data.shape}, idx {idx.shape}")
    if rows.data.shape[0] != base.data.shape[0] or rows.data.shape[2] != base.data.shape[2] \
            or idx.shape != rows.data.shape[:2]:
        raise ShapeError(
            f"scatter_tokens: inconsistent shapes base {base.data.shape}, "
            f"rows {rows.data.shape}, idx {idx.shape}")
    idx = _check_index(idx, base.data.shape[1], "scatter_tokens")
    bidx = np.arange(base.data.shape[0])[:, None]
    data = base.data.copy()
    data[bidx, idx] = rows.data

    def bwd(g):
        dbase = g.copy()
        dbase[bidx, idx] = 0.0
        drows = np.ascontiguousarray(g[bidx, idx])
        return dbase, drows

    return Tensor._from_op(data, (base, rows), "scatter_tokens", bwd)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup: table [N, D], idx [...] -> [..., D]."""
    table = as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.data.shape}")
    idx = _check_index(np.asarray(idx), table.data.shape[0], "embedding")
    data = table.data[idx]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return Tensor._from_op(np.ascontiguousarray(data), (table,), "embedding", bwd)


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select one column per row: a [B, C], idx [B] -> [B]."""
    a = as_tensor(a)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"take_per_row: got {a.data.shape}, idx {idx.shape}")
    idx = _check_index(idx, a.data.shape[1], "take_per_row")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, idx), g)
        return (da,)

    return Tensor._from_op(np.ascontiguousarray(data), (a,), "take_per_row", bwd)


# ---------------------------------------------------------------------------
# convolution support
# ---------------------------------------------------------------------------

def im2col(a: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Extract conv patches: a [B, C, H, W] -> [B, OH*OW, C*k*k]."""
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"im2col: input must be 4-D, got {a.data.shape}")
    _, c, h, w = a.data.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"im2col: size {h}x{w} smaller than k={k} with pad={pad}")
    x = np.ascontiguousarray(a.data)
    data = kernels.im2col(x, k, stride, pad)

    def bwd(g):
        return (kernels.col2im(np.ascontiguousarray(g), c, h, w, k, stride, pad),)

    return Tensor._from_op(data, (a,), "im2col", bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}, {start + length}) outside axis {axis} of {a.data.shape}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(a.data[sl])

    def bwd(g):
        da = np.zeros_like(a.data)
        da[sl] = g
        return (da,)

    return Tensor._from_op(data, (a,), "narrow", bwd)


def upsample_nearest2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a [B, C, H, W] map."""
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: input must be 4-D, got {a.data.shape}")
    b, c, h, w = a.data.shape
    data = np.ascontiguousarray(np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3))

    def bwd(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(data, (a,), "upsample_nearest2x", bwd)
