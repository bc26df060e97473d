"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates ``.grad`` on leaves.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_finite(self) -> bool:
        ok = bool(np.all(np.isfinite(self.data)))
        if self.grad is not None:
            ok = ok and bool(np.all(np.isfinite(self.grad)))
        return ok

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -----------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # method sugar
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_over_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ----------------------------------------------------------------
def _binary(a, b, op: str):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, op)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _binary(a, b, "div")
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), back)


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch a binary elementwise op by name: add, sub, mul, div, maximum, minimum."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div, "maximum": maximum, "minimum": minimum}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](a, b)


def maximum(a, b) -> Tensor:
    a, b = _binary(a, b, "maximum")
    pick_a = a.data >= b.data

    def back(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._from_op(np.where(pick_a, a.data, b.data), (a, b), back)


def minimum(a, b) -> Tensor:
    a, b = _binary(a, b, "minimum")
    pick_a = a.data <= b.data

    def back(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._from_op(np.where(pick_a, a.data, b.data), (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**exponent

    def back(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._from_op(out, (a,), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return Tensor._from_op(out, (a,), lambda g: (g * mask,))


# -- reductions -----------------------------------------------------------------
def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def _expand_reduced(g: np.ndarray, shape: tuple, axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def back(g):
        return (np.array(_expand_reduced(g, a.shape, axes, keepdims)),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) / float(count)


def max_over_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max along one axis (or all); gradient goes to the first maximal entry."""
    if axis is None:
        m = max_over_axis(reshape(a, (-1,)), 0)
        return reshape(m, (1,) * a.ndim) if keepdims else m
    (ax,) = _norm_axis(axis, a.ndim)
    idx = np.argmax(a.data, axis=ax)
    idx_k = np.expand_dims(idx, ax)
    out = np.take_along_axis(a.data, idx_k, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def back(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, idx_k, gk, axis=ax)
        return (full,)

    return Tensor._from_op(out, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return Tensor._from_op(out, (a,), back)


# -- shape ops ------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), back)


def gather(src: Tensor, axis: int, index: np.ndarray) -> Tensor:
    """Pick ``src`` entries along ``axis`` at integer ``index`` (take_along_axis).

    Differentiable with respect to ``src``; repeated indices accumulate.
    """
    (ax,) = _norm_axis(axis, src.ndim)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != src.ndim:
        raise ShapeError(f"gather: index rank {index.ndim} != source rank {src.ndim}")
    n = src.shape[ax]
    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError(f"gather: index out of range for axis {ax} of size {n}")
    out = np.take_along_axis(src.data, index, axis=ax)

    def back(g):
        full = np.zeros_like(src.data)
        grids = list(np.indices(index.shape, sparse=True))
        grids[ax] = index
        np.add.at(full, tuple(grids), g)
        return (full,)

    return Tensor._from_op(out, (src,), back)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    (ax,) = _norm_axis(axis, ts[0].ndim)
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._from_op(out, ts, back)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


# -- linear algebra -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), back)


# -- convolution ----------------------------------------------------------------
def _pad_index(n: int, pad: int, mode: str) -> np.ndarray:
    """Source index for each padded position; -1 marks a zero pad."""
    idx = np.arange(-pad, n + pad)
    if mode == "replicate":
        return np.clip(idx, 0, n - 1)
    return np.where((idx >= 0) & (idx < n), idx, -1)


def _pad_matrix(n: int, pad: int, mode: str) -> np.ndarray:
    src = _pad_index(n, pad, mode)
    m = np.zeros((n + 2 * pad, n))
    valid = src >= 0
    m[np.nonzero(valid)[0], src[valid]] = 1.0
    return m


def _pad(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    width = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    return np.pad(x, width, mode="edge" if mode == "replicate" else "constant")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, padding_mode: str = "zero") -> Tensor:
    """2-D cross-correlation.

    ``x`` is [C_in, H, W] or batched [N, C_in, H, W]; ``w`` is
    [C_out, C_in, kh, kw]. ``padding_mode`` is ``"zero"`` or ``"replicate"``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if padding_mode not in ("zero", "replicate"):
        raise ValueError(f"conv2d: unknown padding mode {padding_mode!r}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError(f"conv2d: expected x [C,H,W] or [N,C,H,W] and w [O,C,kh,kw], got {x.shape} and {w.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d: input channels {c} do not match weight {w.shape}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = _pad(xd, padding, padding_mode)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, w) if bias is None else (x, w, bias)

    def back(g):
        gb = g if batched else g[None]
        gx = gw = gbias = None
        if w.requires_grad:
            gw = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            cols = np.tensordot(gb, w.data, axes=([1], [0]))  # n, ho, wo, c, kh, kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding and padding_mode == "zero":
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            elif padding:
                ph = _pad_matrix(h, padding, padding_mode)
                pw = _pad_matrix(wd, padding, padding_mode)
                gxp = np.einsum("Hh,ncHW,Ww->nchw", ph, gxp, pw, optimize=True)
            gx = np.ascontiguousarray(gxp) if batched else np.ascontiguousarray(gxp[0])
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gbias)

    return Tensor._from_op(out if batched else out[0], parents, back)


def topk_indices(x, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of a 1-d array, descending.

    Ties resolve to the lower index. Not differentiable.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    arr = arr.reshape(-1)
    if not 0 < k <= arr.size:
        raise ValueError(f"topk: K={k} out of range for length {arr.size}")
    return np.argsort(-arr, kind="stable")[:k]
