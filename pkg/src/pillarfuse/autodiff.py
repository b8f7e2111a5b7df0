"""Dense float64 tensors with reverse-mode differentiation.

A small eager tape engine: every operation wraps numpy arithmetic,
records its parents and a backward closure on the output, and
``backward()`` replays the tape in reverse topological order. Tensors
are treated as immutable once created; the tape is rebuilt on every
forward pass. Everything is 64-bit so gradients can be validated
against central finite differences to tight tolerances.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, EmptySetError, ShapeError


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # Make numpy defer mixed ndarray/Tensor arithmetic to our operators
    # instead of broadcasting Tensor as an object scalar.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every requires_grad leaf.

        `self` must hold exactly one element. Repeated calls without
        zeroing accumulate into existing grads.
        """
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar output")
        order = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, power(_wrap(other), -1.0))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError("T is defined for 2-D tensors")
        return permute(self, (1, 0))


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _toposort(root: Tensor) -> list:
    """Reverse topological order of the tape reachable from `root`."""
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(out_data, (a,), backward)


def absolute(a) -> Tensor:
    a = _wrap(a)
    out_data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data))

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at exactly 0."""
    a = _wrap(a)
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    """Numerically stable logistic; output strictly inside (0, 1)."""
    a = _wrap(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0.0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) without overflow; derivative is sigmoid(x)."""
    a = _wrap(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            x = a.data
            s = np.empty_like(x)
            pos = x >= 0.0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            s[~pos] = ex / (1.0 + ex)
            a.accumulate_grad(g * s)

    return _make(out_data, (a,), backward)


# -- reductions ------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        g_arr = np.asarray(g)
        if axis is not None and not keepdims:
            g_arr = np.expand_dims(g_arr, axis)
        a.accumulate_grad(np.broadcast_to(g_arr, a.shape).copy())

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape manipulation -----------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old_shape = a.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old_shape))

    return _make(out_data, (a,), backward)


def permute(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inverse))

    return _make(out_data, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                part.accumulate_grad(g[tuple(index)])

    return _make(out_data, tuple(parts), backward)


def gather_rows(a, index) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatters back (duplicates add)."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    out_data = a.data[index]

    def backward(g):
        if a.requires_grad:
            grad = np.zeros_like(a.data)
            np.add.at(grad, index, g)
            a.accumulate_grad(grad)

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(out_data, (a, b), backward)


# -- set / segment reductions ----------------------------------------------


def max_over_set(a, mask) -> Tensor:
    """Per-channel max over the masked rows of a [P, C] tensor.

    Gradient routes only to the argmax row of each channel, first index
    on ties. Raises on an all-false mask.
    """
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    if a.ndim != 2:
        raise ShapeError("max_over_set expects a 2-D tensor")
    if mask.shape != (a.shape[0],):
        raise ShapeError("mask length must equal the row count")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise EmptySetError("max over an empty point set")
    sub = a.data[rows]
    arg = sub.argmax(axis=0)
    out_data = sub[arg, np.arange(a.shape[1])]

    def backward(g):
        if a.requires_grad:
            grad = np.zeros_like(a.data)
            grad[rows[arg], np.arange(a.shape[1])] = g
            a.accumulate_grad(grad)

    return _make(out_data, (a,), backward)


def segment_max(a, starts) -> Tensor:
    """Per-channel max over contiguous row segments of a [M, C] tensor.

    `starts` holds the first row of every segment (ascending, covering
    all rows). Output is [S, C]; ties route gradient to the first row.
    """
    a = _wrap(a)
    starts = np.asarray(starts, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeError("segment_max expects a 2-D tensor")
    if starts.size == 0 or starts[0] != 0:
        raise ContractError("segment starts must begin at row 0")
    n_rows, n_cols = a.shape
    ends = np.append(starts[1:], n_rows)
    if np.any(ends <= starts):
        raise ContractError("every segment must contain at least one row")
    arg = np.empty((starts.size, n_cols), dtype=np.intp)
    cols = np.arange(n_cols)
    for s, (lo, hi) in enumerate(zip(starts, ends)):
        arg[s] = lo + a.data[lo:hi].argmax(axis=0)
    out_data = a.data[arg, cols]

    def backward(g):
        if a.requires_grad:
            grad = np.zeros_like(a.data)
            np.add.at(grad, (arg, cols), g)
            a.accumulate_grad(grad)

    return _make(out_data, (a,), backward)


def col_scatter(a, flat_index, num_cells: int) -> Tensor:
    """Place rows of a [P, C] tensor into columns of a zero [C, num_cells] map.

    `flat_index[p]` is the destination column of row p; duplicates are a
    contract violation because each pillar owns exactly one cell.
    """
    a = _wrap(a)
    flat_index = np.asarray(flat_index, dtype=np.intp)
    if a.ndim != 2 or flat_index.shape != (a.shape[0],):
        raise ShapeError("col_scatter expects [P, C] rows and one index per row")
    if np.unique(flat_index).size != flat_index.size:
        raise ContractError("duplicate scatter coordinates")
    if flat_index.size and (flat_index.min() < 0 or flat_index.max() >= num_cells):
        raise ContractError("scatter coordinate outside the grid")
    out_data = np.zeros((a.shape[1], num_cells))
    out_data[:, flat_index] = a.data.T

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, flat_index].T)

    return _make(out_data, (a,), backward)


# -- 2-D image ops -----------------------------------------------------------


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a [C_in, H, W] image with a [C_out, C_in, k, k] kernel."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError("conv2d expects [C,H,W] input and [O,C,k,k] kernel")
    c_in, h, w = x.shape
    c_out, c_k, k, k2 = kernel.shape
    if c_k != c_in or k != k2:
        raise ShapeError(f"kernel {kernel.shape} does not match input {x.shape}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h + 2 * padding < k or w + 2 * padding < k or h_out < 1 or w_out < 1:
        raise ShapeError("kernel larger than the padded input")

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    # im2col: patches [h_out*w_out, c_in*k*k]
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [c_in, h_out, w_out, k, k]
    patches = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * k * k)
    w2 = kernel.data.reshape(c_out, c_in * k * k)
    out_data = (patches @ w2.T).T.reshape(c_out, h_out, w_out)

    def backward(g):
        g_mat = g.reshape(c_out, h_out * w_out).T  # [h_out*w_out, c_out]
        if kernel.requires_grad:
            kernel.accumulate_grad((g_mat.T @ patches).reshape(kernel.shape))
        if x.requires_grad:
            g_patches = g_mat @ w2  # [h_out*w_out, c_in*k*k]
            g_padded = np.zeros_like(padded)
            g_patches = g_patches.reshape(h_out, w_out, c_in, k, k)
            for i in range(h_out):
                hi = i * stride
                for j in range(w_out):
                    wj = j * stride
                    g_padded[:, hi:hi + k, wj:wj + k] += g_patches[i, j]
            if padding:
                g_padded = g_padded[:, padding:-padding, padding:-padding]
            x.accumulate_grad(g_padded)

    return _make(out_data, (x, kernel), backward)


def upsample_nearest(x, factor: int) -> Tensor:
    """Repeat each spatial cell of a [C, H, W] tensor `factor` times per axis."""
    x = _wrap(x)
    if x.ndim != 3:
        raise ShapeError("upsample_nearest expects a [C,H,W] tensor")
    factor = int(factor)
    if factor < 1:
        raise ContractError("upsample factor must be >= 1")
    if factor == 1:
        out_data = x.data.copy()
    else:
        out_data = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def backward(g):
        if x.requires_grad:
            c, h, w = x.shape
            g_blocks = g.reshape(c, h, factor, w, factor)
            x.accumulate_grad(g_blocks.sum(axis=(2, 4)))

    return _make(out_data, (x,), backward)
