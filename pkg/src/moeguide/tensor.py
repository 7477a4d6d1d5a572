"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values are numpy arrays in float32 (training) or float64 (verification).
Every primitive records a backward rule on the process-global tape ``GRAPH``;
``backward(loss)`` replays the tape in reverse execution order, which is a
valid reverse topological order, and accumulates gradients into
``Tensor.grad``.  Forward values are identical whether or not recording is
enabled, and gradients are bitwise reproducible for identical inputs.
"""

from __future__ import annotations

import contextlib

import numpy as np

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))

# tanh-form GELU constants, fixed so 32- and 64-bit builds agree
_GELU_C0 = 0.7978845608
_GELU_C1 = 0.044715


class ShapeError(ValueError):
    """Operand shapes or dtypes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class _Op:
    __slots__ = ("name", "inputs", "output", "bw")

    def __init__(self, name, inputs, output, bw):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.bw = bw


class Graph:
    """Ordered record of primitives applied since the last reset."""

    __slots__ = ("ops", "enabled")

    def __init__(self):
        self.ops = []
        self.enabled = True

    def reset(self):
        self.ops.clear()

    def __len__(self):
        return len(self.ops)


GRAPH = Graph()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forward values are unaffected."""
    prev = GRAPH.enabled
    GRAPH.enabled = False
    try:
        yield
    finally:
        GRAPH.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED:
            arr = arr.astype(np.float64)
        if arr.dtype not in _ALLOWED:
            raise TypeError(f"Tensor dtype must be float32 or float64, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no gradient flow (shares the underlying array)."""
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"


def _record(name, inputs, out_data, bw) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if GRAPH.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        GRAPH.ops.append(_Op(name, inputs, out, bw))
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor):
    """Accumulate gradients of the scalar ``loss`` into every tensor that
    requires grad, replaying the tape in reverse."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.grad = np.ones_like(loss.data)
    for op in reversed(GRAPH.ops):
        g = op.output.grad
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.bw(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                # may alias g; accumulation below is out-of-place, so safe
                t.grad = gi
            else:
                t.grad = t.grad + gi


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def detach(t: Tensor) -> Tensor:
    return t.detach()


# -- validation helpers ----------------------------------------------------


def _check_dtypes(name, a, b):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{name}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` along axes numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axis(name, axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{name}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _swap_last(arr):
    return np.swapaxes(arr, -1, -2)


# -- primitives ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bw(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bw(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = -_unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), out, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("div", a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", (a, b), out, bw)


def add_scalar(a: Tensor, s) -> Tensor:
    s = float(s)
    out = a.data + a.data.dtype.type(s)
    return _record("add_scalar", (a,), out, lambda g: (g,))


def mul_scalar(a: Tensor, s) -> Tensor:
    s = a.data.dtype.type(float(s))
    out = a.data * s
    return _record("mul_scalar", (a,), out, lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {tuple(ad.shape)} @ {tuple(bd.shape)}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {tuple(ad.shape)} @ {tuple(bd.shape)}")
    if bd.ndim > 2 and ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ: {tuple(ad.shape)} @ {tuple(bd.shape)}")
    if bd.ndim > 2 and ad.ndim == 2:
        raise ShapeError(f"matmul: 2-d @ batched is unsupported: {tuple(ad.shape)} @ {tuple(bd.shape)}")
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ _swap_last(bd)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap_last(ad) @ g
        return ga, gb

    return _record("matmul", (a, b), out, bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of a {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes (matrix transpose with batch dims)."""
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {orig} into {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(orig),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("log: empty input")
    out = np.log(a.data)
    return _record("log", (a,), out, lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0
    return _record("relu", (a,), out, lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(c0 (x + c1 x^3)))."""
    x = a.data
    th = np.tanh(_GELU_C0 * (x + _GELU_C1 * x * x * x))

    def bw(g):
        inner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * inner),)

    return _record("gelu", (a,), 0.5 * x * (1.0 + th), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"layer_norm: last axis is empty for shape {tuple(a.shape)}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _record("layer_norm", (a,), y, bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis("softmax", axis, a.ndim)
    if a.shape[ax] == 0:
        raise ShapeError(f"softmax: axis {axis} is empty for shape {tuple(a.shape)}")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (a,), out, bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        out = a.data.sum()

        def bw(g):
            return (np.full(a.data.shape, g, dtype=a.data.dtype),)

    else:
        ax = _norm_axis("sum", axis, a.ndim)
        out = a.data.sum(axis=ax, keepdims=keepdims)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, a.data.shape),)

    return _record("sum", (a,), out, bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[_norm_axis("mean", axis, a.ndim)]
    if n == 0:
        raise ShapeError(f"mean: empty axis {axis} for shape {tuple(a.shape)}")
    return mul_scalar(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ax = _norm_axis("concat", axis, tensors[0].ndim)
    for t in tensors[1:]:
        _check_dtypes("concat", tensors[0], t)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(int(lo), int(hi))
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return tuple(grads)

    return _record("concat", tuple(tensors), out, bw)


def getitem(a: Tensor, idx) -> Tensor:
    norm = idx if isinstance(idx, tuple) else (idx,)
    for part in norm:
        if not (part is Ellipsis or part is None or isinstance(part, (int, slice))):
            raise ShapeError(f"getitem: only basic indexing is supported, got {part!r}")
    out = a.data[idx]

    def bw(g):
        z = np.zeros_like(a.data)
        z[idx] += g
        return (z,)

    return _record("getitem", (a,), out, bw)
