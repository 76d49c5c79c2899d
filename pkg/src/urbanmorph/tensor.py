"""Reverse-mode automatic differentiation over dense numpy storage.

A Tensor wraps an ndarray and remembers how it was produced (parent
tensors plus a backward closure).  Calling backward() on a scalar loss
topologically orders the recorded operations and replays their vector-
Jacobian products in reverse, accumulating into .grad buffers.  Gradients
accumulate additively until zero_grad() is called, so multiple backward
passes sum.

All forward kernels are numpy; the graph recording and every backward
rule live here.  Works in float64 (default, used by the test suite) or
float32 (set_default_dtype, used for image-model training speed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for the requested op."""


class DomainError(ValueError):
    """Input outside an op's mathematical domain (log/sqrt of negatives)."""


class GraphError(RuntimeError):
    """Backward invoked without a usable recorded graph."""


_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class no_grad:
    """Context manager: forward ops inside record no graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self.op = "leaf"

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> "ComputationRecord":
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; all real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class RecordEntry:
    """One recorded primitive op: output plus the inputs that produced it."""

    out: Tensor
    parents: tuple


@dataclass
class ComputationRecord:
    """Topologically ordered log of the ops reachable from a loss.

    Every entry's parents appear earlier in the list, so replaying the
    entries in reverse yields the complete backward sweep.
    """

    entries: list

    def op_names(self) -> list:
        return [e.out.op for e in self.entries]

    def is_topologically_ordered(self) -> bool:
        seen = set()
        for e in self.entries:
            for p in e.parents:
                if p._backward_fn is not None and id(p) not in seen:
                    return False
            seen.add(id(e.out))
        return True


def parameter(data, rng=None, fan_in=None) -> Tensor:
    """Learnable leaf. With rng and fan_in, samples uniform(-1/sqrt(fan_in), +)."""
    if rng is not None:
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=data)
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward_fn = None
    out.op = op
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def backward_fn(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward_fn, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    _check_broadcast(a, b, "div")
    data = a.data / b.data

    def backward_fn(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), backward_fn, "div")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D, batched 3-D @ 2-D, or batched 3-D @ 3-D."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: inner dims differ: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward_fn(g):
            return g @ b.data.T, a.data.T @ g

    elif a.ndim == 3 and b.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ShapeMismatch(f"matmul: inner dims differ: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward_fn(g):
            ga = g @ b.data.T
            gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
            return ga, gb

    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeMismatch(f"matmul: batch shapes differ: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward_fn(g):
            ga = g @ b.data.transpose(0, 2, 1)
            gb = a.data.transpose(0, 2, 1) @ g
            return ga, gb

    else:
        raise ShapeMismatch(f"matmul: unsupported ranks: {a.shape} @ {b.shape}")
    return _make(data, (a, b), backward_fn, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise ShapeMismatch(f"transpose: default form expects 2-D, got {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward_fn(g):
        return (g.transpose(inverse),)

    return _make(data, (a,), backward_fn, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), backward_fn, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward_fn, "concat")


def _index_may_repeat(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def slice_(a: Tensor, index) -> Tensor:
    data = a.data[index]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.data.dtype)

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        if _index_may_repeat(index):
            np.add.at(ga, index, g)  # integer indices may hit cells twice
        else:
            ga[index] += g
        return (ga,)

    return _make(data, (a,), backward_fn, "slice")


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(data, dtype=a.data.dtype), (a,), backward_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(data, dtype=a.data.dtype), (a,), backward_fn, "mean")


def stddev(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Population standard deviation along axis.

    Forward is exact (zero for constant slices).  The backward rule
    (x - mu) / (n * s) clamps s at 1e-12 so constant slices yield zero
    gradient instead of NaN.
    """
    axis_t = tuple(np.atleast_1d(axis))
    n = int(np.prod([a.shape[i] for i in axis_t]))
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    # constant slices are exactly zero regardless of rounding in the mean
    const = a.data.min(axis=axis_t, keepdims=True) == \
        a.data.max(axis=axis_t, keepdims=True)
    centered = np.where(const, 0.0, centered)
    var = (centered * centered).mean(axis=axis, keepdims=True)
    s_keep = np.sqrt(var)
    data = s_keep if keepdims else np.squeeze(s_keep, axis=axis)

    def backward_fn(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        denom = n * np.maximum(s_keep, 1e-12)
        return (g * centered / denom,)

    return _make(np.asarray(data, dtype=a.data.dtype), (a,), backward_fn, "stddev")


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (a,), backward_fn, "softmax")


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), backward_fn, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - y * y),)

    return _make(y, (a,), backward_fn, "tanh")


def relu(a: Tensor) -> Tensor:
    # np.maximum (not where) so NaN propagates instead of masking to 0
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _make(data, (a,), backward_fn, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """Composed as relu(x) - slope * relu(-x)."""
    return sub(relu(a), mul(relu(-a), slope))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward_fn(g):
        return (g * y,)

    return _make(y, (a,), backward_fn, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    data = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return _make(data, (a,), backward_fn, "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    y = np.sqrt(a.data)

    def backward_fn(g):
        return (g * 0.5 / y,)

    return _make(y, (a,), backward_fn, "sqrt")


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def backward_fn(g):
        return (g * 2.0 * a.data,)

    return _make(data, (a,), backward_fn, "square")


def dropout(a: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p). Identity when p == 0."""
    if p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(mask))


# ---------------------------------------------------------------------------
# spatial ops


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, w: Tensor, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, square zero padding, stride 1 or 2."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected 4-D x and w, got {x.shape}, {w.shape}")
    bsz, cin, h, wth = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d: channel mismatch: x {x.shape} vs w {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    data = out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)  # (B*Ho*Wo, Cout)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = gmat @ wmat  # (B*Ho*Wo, Cin*kh*kw)
        g6 = gcols.reshape(bsz, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wth] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward_fn, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the two trailing spatial dims."""
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample2x: expected 4-D input, got {x.shape}")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def backward_fn(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(data, (x,), backward_fn, "upsample2x")


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor) -> ComputationRecord:
    """Reverse sweep from a scalar loss; returns the replayed record."""
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._backward_fn is None:
        raise GraphError("backward: loss has no recorded computation graph")

    entries: list[RecordEntry] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            entries.append(RecordEntry(out=node, parents=node._parents))
            continue
        if id(node) in visited or node._backward_fn is None:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for entry in reversed(entries):
        node = entry.out
        if node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for p, g in zip(entry.parents, grads):
            if p.requires_grad:
                p.accumulate_grad(np.asarray(g, dtype=p.data.dtype))
    return ComputationRecord(entries=entries)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def global_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_global_norm(params, max_norm: float) -> float:
    """Scales all grads so their joint L2 norm is at most max_norm."""
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
