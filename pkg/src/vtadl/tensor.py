"""Dense tensors with tape-based reverse-mode automatic differentiation.

Only the operations the anomaly model needs are provided. Every op records
an entry on the active :class:`Tape` when gradients are enabled and at least
one operand requires a gradient; :func:`backward` replays the tape in reverse.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "no_grad",
    "grad_enabled",
    "current_tape",
    "backward",
    "matmul",
    "layer_norm",
    "softmax",
    "log_softmax",
    "logsumexp",
    "activation",
    "conv_transpose2d",
    "batch_norm",
    "correlate_valid",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when operand extents do not conform."""


_GRAD_ENABLED = True


class Tape:
    """Ordered record of executed differentiable operations.

    Each entry is ``(output, parents, backward_fn)``. Entries are appended in
    execution order, so every operand of entry ``i`` is either a leaf or the
    output of an earlier entry.
    """

    def __init__(self) -> None:
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        out._tape = self
        out._index = len(self.entries)
        self.entries.append((out, parents, fn))

    def clear(self) -> None:
        for out, _, _ in self.entries:
            out._tape = None
            out._index = None
        self.entries = []


_TAPE = Tape()


def current_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array that may participate in a differentiable computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index: int | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._index is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor of shape {self.shape}")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.record(out, tuple(parents), fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -----------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data

    def fn(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# -- reductions and shape ---------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


# -- linear algebra ------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), fn)


# -- normalization and probability ----------------------------------------
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis vector to zero mean and unit variance, then scale/shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm feature size {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), fn)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out = np.log(s) + m

    def fn(g):
        w = np.exp(x.data - out)
        return (np.expand_dims(g, axis) * w,)

    return _make(np.squeeze(out, axis=axis), (x,), fn)


# -- activations --------------------------------------------------------
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def activation(kind: str, x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise nonlinearity: ``gelu`` (exact erf form), ``softplus``, ``tanh`` or ``relu``."""
    v = x.data
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(v / _SQRT2))
        out = v * cdf
        return _make(out.astype(v.dtype, copy=False), (x,),
                     lambda g: (g * (cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)),))
    if kind == "softplus":
        if beta <= 0:
            raise ValueError("softplus beta must be positive")
        bv = beta * v
        e = np.exp(-np.abs(bv))
        out = np.maximum(bv, 0.0) + np.log1p(e)
        # sigmoid(beta*x), computed without overflow
        sig = np.where(bv >= 0, 1.0, e) / (1.0 + e)
        return _make(out, (x,), lambda g: (g * beta * sig,))
    if kind == "tanh":
        out = np.tanh(v)
        return _make(out, (x,), lambda g: (g * (1.0 - out * out),))
    if kind == "relu":
        mask = v > 0
        return _make(np.where(mask, v, 0.0).astype(v.dtype, copy=False), (x,), lambda g: (g * mask,))
    raise ValueError(f"unknown activation kind {kind!r}")


# -- convolution-type ops -------------------------------------------------
def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Fractionally strided convolution on NCHW input with a (Cin, Cout, k, k) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    b, cin, h, w = x.shape
    kcin, cout, k, k2 = kernel.shape
    if kcin != cin or k != k2:
        raise ShapeError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
    out_h, out_w = full_h - 2 * padding, full_w - 2 * padding
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"nonpositive output extent ({out_h}, {out_w})")

    # cols[b, i, j, co, ki, kj]
    cols = np.tensordot(x.data.transpose(0, 2, 3, 1), kernel.data, axes=([3], [0]))
    full = np.zeros((b, cout, full_h, full_w), dtype=np.result_type(x.data, kernel.data))
    hs, ws = stride * (h - 1) + 1, stride * (w - 1) + 1
    for ki in range(k):
        for kj in range(k):
            full[:, :, ki:ki + hs:stride, kj:kj + ws:stride] += cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + out_h, padding:padding + out_w]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    else:
        out = out.copy()

    def fn(g):
        gfull = np.zeros((b, cout, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding:padding + out_h, padding:padding + out_w] = g
        dcols = np.empty((b, h, w, cout, k, k), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                dcols[:, :, :, :, ki, kj] = gfull[:, :, ki:ki + hs:stride, kj:kj + ws:stride].transpose(0, 2, 3, 1)
        dx = dk = None
        if x.requires_grad:
            dx = np.tensordot(dcols, kernel.data, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if kernel.requires_grad:
            dk = np.tensordot(x.data.transpose(0, 2, 3, 1), dcols, axes=([0, 1, 2], [0, 1, 2]))
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of NCHW input.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is customary); otherwise the stored
    running statistics are applied.
    """
    c = x.shape[1]
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    if not training:
        scale = gamma.data / np.sqrt(running_var + eps)
        shift = beta.data - running_mean * scale
        xhat = (x.data - running_mean.reshape(shape)) / np.sqrt(running_var.reshape(shape) + eps)
        out = x.data * scale.reshape(shape) + shift.reshape(shape)
        return _make(out.astype(x.dtype, copy=False), (x, gamma, beta),
                     lambda g: (g * scale.reshape(shape), (g * xhat).sum(axis=axes), g.sum(axis=axes)))

    n = x.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    unbiased = var.reshape(c) * (n / max(n - 1, 1))
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def fn(g):
        dxhat = g * gamma.data.reshape(shape)
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), fn)


def correlate_valid(x: Tensor, weights: np.ndarray, axis: int) -> Tensor:
    """1-D 'valid' correlation of ``x`` with a constant kernel along ``axis``."""
    weights = np.asarray(weights, dtype=x.dtype)
    n = x.shape[axis]
    k = weights.shape[0]
    m = n - k + 1
    if m < 1:
        raise ShapeError(f"kernel of length {k} longer than axis extent {n}")
    xm = np.moveaxis(x.data, axis, 0)
    out = np.zeros((m,) + xm.shape[1:], dtype=x.dtype)
    for t in range(k):
        out += weights[t] * xm[t:t + m]

    def fn(g):
        gm = np.moveaxis(g, axis, 0)
        dx = np.zeros_like(xm)
        for t in range(k):
            dx[t:t + m] += weights[t] * gm
        return (np.moveaxis(dx, 0, axis),)

    return _make(np.moveaxis(out, 0, axis), (x,), fn)


# -- backward ---------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays. The tape is cleared
    afterwards, so a second call on the same loss is an error.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._index is None or tape.entries[loss._index][0] is not loss:
        raise RuntimeError("loss was not produced on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for i in range(loss._index, -1, -1):
        out, parents, fn = tape.entries[i]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._index is None:
                pg = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    tape.clear()


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], step: float = 1e-5,
              indices: dict[int, np.ndarray] | None = None, floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` must rebuild the scalar loss from the current contents of
    ``inputs``. ``indices`` optionally restricts the check, per input
    position, to flat element indices.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for pos, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            idx = range(flat.size) if indices is None or pos not in indices else indices[pos]
            for j in idx:
                orig = flat[j]
                flat[j] = orig + step
                fp = float(fn().data)
                flat[j] = orig - step
                fm = float(fn().data)
                flat[j] = orig
                num = (fp - fm) / (2.0 * step)
                ana = float(analytic[pos].reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
