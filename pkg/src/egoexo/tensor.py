"""A small dense tensor with tape-based reverse-mode differentiation.

Every differentiable op computes its forward result with numpy and, if any
input takes part in gradient recording, appends a node to the active
:class:`Tape`.  :func:`backward` walks that tape in reverse.  Data defaults
to float32; :func:`check_mode` switches newly created tensors to float64 for
finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_state = {"dtype": np.float32, "grad": True, "check_finite": True}
_tapes: list["Tape"] = []


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def check_mode():
    """Create tensors in float64 while the context is active."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tape:
    """Ordered record of executed differentiable ops.

    Used as a context manager; ops executed inside are appended in execution
    order, which is already a topological order of the graph.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple, Callable]] = []

    def record(self, out, inputs, fn):
        self.ops.append((out, inputs, fn))

    def clear(self):
        self.ops.clear()

    def __len__(self):
        return len(self.ops)

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False


_default_tape = Tape()


def current_tape() -> Tape:
    return _tapes[-1] if _tapes else _default_tape


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "is_leaf", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self.is_leaf = True
        self.name = name

    # -- gradient buffer ---------------------------------------------------
    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    # -- conveniences ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _out(data, inputs, fn) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by tensor op")
    needs = _state["grad"] and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out._grad = None
    out.is_leaf = not needs
    out.name = None
    if needs:
        current_tape().record(out, inputs, fn)
    return out


def unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _out(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _out(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    out = ad / bd
    return _out(out, (a, b), lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def scale(a, s: float):
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    return _out(a.data * s, (a,), lambda g: (g * s,))


def exp(a):
    y = np.exp(a.data)
    return _out(y, (a,), lambda g: (g * y,))


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive value")
    return _out(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a):
    y = _sigmoid_np(a.data)
    return _out(y, (a,), lambda g: (g * y * (1 - y),))


def _sigmoid_np(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(a):
    x = a.data
    s = _sigmoid_np(x)
    return _out(x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),))


def relu(a):
    x = a.data
    m = x > 0
    return _out(np.where(m, x, x.dtype.type(0)), (a,), lambda g: (g * m,))


def clip(a, lo, hi):
    x = a.data
    m = (x >= lo) & (x <= hi)
    return _out(np.clip(x, lo, hi), (a,), lambda g: (g * m,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "silu": silu,
    "relu": relu,
}


def elementwise(kind: str, a, b=None):
    """Dispatch by name; ``scale`` takes a python float as ``b``."""
    if kind == "scale":
        return scale(a, b)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b) if b is not None else fn(a)


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

def reshape(a, shape):
    src = a.shape
    return _out(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _out(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def tsum(a, axis=None, keepdims=False):
    src = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _out(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def amax(a, axis: int, keepdims=False):
    """Max along one axis; gradient goes to the first maximal element."""
    x = a.data
    idx = np.expand_dims(x.argmax(axis=axis), axis)
    y = np.take_along_axis(x, idx, axis=axis)

    def fn(g):
        gx = np.zeros_like(x)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx, gk, axis=axis)
        return (gx,)

    return _out(y if keepdims else np.squeeze(y, axis), (a,), fn)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _out(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def getitem(a, idx):
    src = a.shape
    dt = a.dtype

    def fn(g):
        gx = np.zeros(src, dtype=dt)
        gx[idx] += g
        return (gx,)

    return _out(np.array(a.data[idx]), (a,), fn)


def take_rows(table, ids):
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    src = table.shape

    def fn(g):
        gt = np.zeros(src, dtype=g.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _out(table.data[ids], (table,), fn)


# ---------------------------------------------------------------------------
# linear algebra and neural-net primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims {a.shape} @ {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _out(ad @ bd, (a, b), fn)


def conv_out_size(n, k, stride, pad):
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {n + 2 * pad}")
    return span // stride + 1


def conv2d(x, w, bias=None, stride=1, pad=0):
    """Cross-correlation with zero padding over ``[B,C,H,W]`` inputs."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch x={x.shape} w={w.shape}")
    co, ci, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernels must have odd size")
    b, _, h, wd = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(co, -1)
    y = cols @ wm.T
    if bias is not None:
        y += bias.data
    out = np.ascontiguousarray(y.reshape(b, ho, wo, co).transpose(0, 3, 1, 2))
    xp_shape = xp.shape

    def fn(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gf.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxp = kernels.col2im(gf @ wm, xp_shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gf.sum(axis=0)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _out(out, inputs, fn)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _out(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _out(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5):
    """Group normalization over ``[B,C,...]`` followed by a per-channel affine."""
    b, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gm = gamma.data.reshape(bshape)
    out = xhat * gm + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def fn(g):
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxh = (g * gm).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        dx = inv * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
        return dx.reshape(x.shape), dgamma, dbeta

    return _out(out, (x, gamma, beta), fn)


def _bilinear_matrix(n, factor, dtype):
    # align_corners=False: source = (i + 0.5) / factor - 0.5, clamped at the borders
    m = np.zeros((n * factor, n), dtype=np.float64)
    for i in range(n * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    return m.astype(dtype)


def upsample_bilinear(x, factor: int = 2):
    """Bilinear upsampling by an integer factor (align_corners=False)."""
    h, w = x.shape[-2:]
    mh = _bilinear_matrix(h, factor, x.dtype)
    mw = _bilinear_matrix(w, factor, x.dtype)
    out = mh @ x.data @ mw.T
    return _out(out, (x,), lambda g: (mh.T @ g @ mw,))


def upsample_bilinear2x(x):
    return upsample_bilinear(x, 2)


def pool2d(x, kind: str, k: int, stride: int | None = None):
    stride = k if stride is None else stride
    b, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} does not fit {h}x{w}")
    ho = conv_out_size(h, k, stride, 0)
    wo = conv_out_size(w, k, stride, 0)
    if kind == "max":
        val, idx = kernels.maxpool(x.data, k, stride, ho, wo)
        return _out(val, (x,), lambda g: (kernels.maxpool_backward(g, idx, x.shape, k, stride),))
    if kind == "avg":
        cols = kernels.im2col(x.data, k, k, stride, ho, wo)
        val = cols.reshape(b, ho, wo, c, k * k).mean(axis=-1).transpose(0, 3, 1, 2)

        def fn(g):
            gc = np.repeat(g.transpose(0, 2, 3, 1).reshape(-1, c, 1) / (k * k), k * k, axis=2)
            return (kernels.col2im(gc.reshape(b * ho * wo, c * k * k), x.shape, k, k, stride, ho, wo),)

        return _out(np.ascontiguousarray(val), (x,), fn)
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None):
    """Populate ``.grad`` of every grad-enabled leaf that ``loss`` depends on.

    Gradients accumulate into existing leaf buffers.  The tape is consumed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape() if tape is None else tape
    if not loss.requires_grad:
        tape.clear()
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = t.grad + gi
            else:
                k = id(t)
                grads[k] = grads[k] + gi if k in grads else gi
    tape.clear()


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (one element at a time)."""
    x.data = np.ascontiguousarray(x.data)
    base = x.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(_scalar(f(x)))
            flat[i] = orig - h
            fm = float(_scalar(f(x)))
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v):
    return v.data.reshape(()) if isinstance(v, Tensor) else v


def rel_error(analytic, numeric) -> float:
    """Max abs difference scaled by the larger of the two max magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / denom)
