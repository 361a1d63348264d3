"""Reverse-mode autodiff over dense NCHW tensors.

Minimal op set for a convolutional autoencoder and its training losses:
convolution / transposed convolution, pointwise nonlinearities, rounding
with a straight-through backward, elementwise arithmetic and reductions.
Forward values live in numpy arrays (float32 in production, float64 for
the gradient-check harness); gradients accumulate into ``Tensor.grad``.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "backward",
    "zero_grad",
    "set_check_finite",
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "abs_",
    "square",
    "sqrt",
    "pow_const",
    "sum_",
    "mean",
    "l1_norm",
    "l2_norm",
    "reshape",
    "leaky_relu",
    "sigmoid",
    "ste_round",
    "conv2d",
    "conv2d_transpose",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Enable per-op NaN/Inf assertions on forward results (slow; for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """Dense real array with optional gradient slot.

    ``data`` is immutable by convention after creation (training updates
    replace or write parameter data explicitly between graph executions);
    ``grad`` is the only mutable slot during backward.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, severed from differentiation (shares the data array)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        return t

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are the only implicit broadcast
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return mul_scalar(self, other) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tape:
    """Ordered record of executed ops; reverse replay drives backward.

    A tape and the tensors produced on it are confined to one thread.
    Use as a context manager::

        with Tape() as tape:
            y = conv2d(x, w, b, stride=2, padding=1)
            loss = mean(square(sub(y, target)))
        backward(loss, tape)
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self):
        return len(self._records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "tapes must nest"
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self._records.append(_Record(out, inputs, vjp))


_tls = threading.local()


def _stack() -> list:
    s = getattr(_tls, "tapes", None)
    if s is None:
        s = []
        _tls.tapes = s
    return s


def _active_tape() -> Optional[Tape]:
    s = _stack()
    return s[-1] if s else None


def _make_out(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value in forward result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every tensor on the tape.

    ``loss`` must be a scalar produced on this tape.  Grads accumulate
    across calls; reset with :func:`zero_grad`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    for rec in reversed(tape._records):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.vjp(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            t.accumulate_grad(gt)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make_out(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make_out(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make_out(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make_out(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def add_scalar(a: Tensor, c) -> Tensor:
    c = a.dtype.type(c)
    return _make_out(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c) -> Tensor:
    c = a.dtype.type(c)
    return _make_out(a.data * c, (a,), lambda g: (g * c,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make_out(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make_out(ad * ad, (a,), lambda g: (g * (2.0 * ad),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make_out(out, (a,), lambda g: (g * (0.5 / out),))


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent (a > 0 for fractional p)."""
    ad = a.data
    out = ad**p
    return _make_out(out, (a,), lambda g: (g * (p * ad ** (p - 1.0)),))


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if np.isscalar(axis):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _unreduce(g: np.ndarray, shape, axes) -> np.ndarray:
    for ax in axes:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _normalize_axes(axis, a.data.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes if axes else None)
    return _make_out(np.asarray(out, dtype=a.dtype), (a,), lambda g: (_unreduce(g, shape, axes),))


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _normalize_axes(axis, a.data.ndim)
    shape = a.shape
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes if axes else None)
    inv = a.dtype.type(1.0 / count)
    return _make_out(np.asarray(out, dtype=a.dtype), (a,), lambda g: (_unreduce(g * inv, shape, axes),))


def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute values over all elements (scalar)."""
    ad = a.data
    out = np.abs(ad).sum()
    return _make_out(
        np.asarray(out, dtype=a.dtype), (a,), lambda g: (g.reshape(()) * np.sign(ad),)
    )


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm over all elements (scalar); subgradient 0 at x == 0."""
    ad = a.data
    out = np.sqrt((ad * ad).sum())

    def vjp(g):
        if out == 0.0:
            return (np.zeros_like(ad),)
        return (g.reshape(()) * (ad / out),)

    return _make_out(np.asarray(out, dtype=a.dtype), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make_out(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# nonlinearities and binarization


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    ad = a.data
    pos = ad >= 0
    out = np.where(pos, ad, a.dtype.type(slope) * ad)

    def vjp(g):
        return (np.where(pos, g, a.dtype.type(slope) * g),)

    return _make_out(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, clamped strictly inside (0, 1) at float saturation."""
    z = a.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    fi = np.finfo(z.dtype)
    np.clip(out, fi.tiny, np.nextafter(z.dtype.type(1), z.dtype.type(0)), out=out)

    def vjp(g):
        return (g * (out * (1.0 - out)),)

    return _make_out(out, (a,), vjp)


def ste_round(a: Tensor) -> Tensor:
    """Round to nearest (ties away from zero); backward is the identity."""
    ad = a.data
    out = np.where(ad >= 0, np.floor(ad + 0.5), np.ceil(ad - 0.5)).astype(a.dtype)
    return _make_out(out, (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# convolution (cross-correlation) and its transpose


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """Extract sliding patches of an (N,C,H,W) array into (N, C*kh*kw, L)."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add (N, C*kh*kw, L) columns back to an (N,C,H,W) array."""
    n, c, h, w = shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros(shape, dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[
                :, :, i, j
            ]
    return out


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (N, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,).
    Output spatial extent is floor((H + 2p - kh)/stride) + 1.
    """
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels ({x.shape}) but weight expects {cin_w} ({weight.shape})")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride/padding {stride}/{padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")

    xp = _pad2d(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def vjp(g):
        gflat = g.reshape(n, cout, ho * wo)
        gb = g.sum(axis=(0, 2, 3))
        gw = np.einsum("ncl,nkl->ck", gflat, cols, optimize=True).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gflat)
        gxp = _col2im(gcols, xp.shape, kh, kw, stride)
        gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
        return (gx, gw, gb)

    return _make_out(out, (x, weight, bias), vjp)


def conv2d_transpose(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed 2-D convolution (the adjoint of conv2d w.r.t. its input).

    x: (N, Cin, H, W); weight: (Cin, Cout, kh, kw); bias: (Cout,).
    Output spatial extent is (H - 1)*stride - 2*padding + kh.
    """
    n, cin, h, w = x.shape
    cin_w, cout, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d_transpose: input has {cin} channels ({x.shape}) but weight expects {cin_w} ({weight.shape})")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} != ({cout},)")
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d_transpose: non-positive output extent {ho}x{wo}")

    xflat = x.data.reshape(n, cin, h * w)
    w2 = weight.data.reshape(cin, cout * kh * kw)
    cols = np.matmul(w2.T, xflat)
    full = _col2im(cols, (n, cout, hf, wf), kh, kw, stride)
    out = full if padding == 0 else full[:, :, padding:-padding, padding:-padding]
    out = out + bias.data[None, :, None, None]

    def vjp(g):
        gb = g.sum(axis=(0, 2, 3))
        if padding == 0:
            gfull = g
        else:
            gfull = np.zeros((n, cout, hf, wf), dtype=g.dtype)
            gfull[:, :, padding:-padding, padding:-padding] = g
        gcols, _, _ = _im2col(gfull, kh, kw, stride)
        gx = np.matmul(w2, gcols).reshape(x.shape)
        gw = np.einsum("nkl,ncl->kc", gcols, xflat, optimize=True).T.reshape(weight.shape)
        return (gx, gw, gb)

    return _make_out(out, (x, weight, bias), vjp)
