"""Dense float32 tensors with a minimal reverse-mode differentiation tape.

Every operation computes its forward value eagerly with numpy and, when a
tape is active and an input requires gradients, records a backward rule on
the tape. ``Tape.backward`` replays the rules in exact reverse execution
order, accumulating gradients additively across fan-out.

Tapes are kept in thread-local storage: independent tapes may run on
independent threads, a single tape is single-threaded.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""


_LOCAL = threading.local()


def _tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around the forward pass, then call
    ``backward(loss)``.
    """

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "Tape":
        if getattr(_LOCAL, "tape", None) is not None:
            raise RuntimeError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc):
        _LOCAL.tape = None
        return False

    def record(self, backward) -> None:
        self._records.append(backward)

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss) = 1 and replay recorded rules in reverse."""
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss._accum(np.ones_like(loss.data))
        for rule in reversed(self._records):
            rule()


class Tensor:
    """A dense float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(out_data, inputs, backward) -> Tensor:
    """Wrap an op result; record the backward rule when taping."""
    tape = _tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:

        def run():
            # outputs that never received a gradient are off the loss path
            if out.grad is not None:
                backward(out.grad)

        tape.record(run)
    return out


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accum(-g)

    return _make(-a.data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accum(g / (2.0 * out_data))

    return _make(out_data, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)

    def bw(g):
        a._accum(g * ((a.data >= lo) & (a.data <= hi)).astype(np.float32))

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(np.float32)

    def bw(g):
        a._accum(g * s * (1.0 - s))

    return _make(s, (a,), bw)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(np.float32)

    def bw(g):
        a._accum(g * (s + x * s * (1.0 - s)))

    return _make(x * s, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out_data = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).astype(np.float32)

    def bw(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(np.float32)
        a._accum(g * s)

    return _make(out_data, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data

    def bw(g):
        a._accum(g * np.where(x > 0, 1.0, slope).astype(np.float32))

    return _make(np.where(x > 0, x, slope * x).astype(np.float32), (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(gg, a.data.shape).astype(np.float32))

    return _make(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        a._accum((np.broadcast_to(gg, a.data.shape) / count).astype(np.float32))

    return _make(a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bw(g):
        a._accum(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def moveaxis(a: Tensor, src, dst) -> Tensor:
    def bw(g):
        a._accum(np.moveaxis(g, dst, src))

    return _make(np.ascontiguousarray(np.moveaxis(a.data, src, dst)), (a,), bw)


def gather(a: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder axis 0 by a bijective permutation; backward scatters through
    the inverse permutation."""
    perm = np.asarray(perm, dtype=np.int64)
    n = a.data.shape[0]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm must be a bijective permutation of axis 0")
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)

    def bw(g):
        a._accum(g[inv])

    return _make(a.data[perm], (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def chunk(a: Tensor, n: int, axis: int = 0) -> list[Tensor]:
    size = a.data.shape[axis]
    if size % n:
        raise ValueError(f"axis size {size} not divisible into {n} chunks")
    step = size // n
    outs = []
    for k in range(n):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(k * step, (k + 1) * step)
        idx = tuple(idx)

        def bw(g, idx=idx):
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a._accum(buf)

        outs.append(_make(np.ascontiguousarray(a.data[idx]), (a,), bw))
    return outs


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """a[..., Din] @ w[Din, Dout]."""
    a, w = as_tensor(a), as_tensor(w)
    if w.data.ndim != 2 or a.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"matmul shapes {a.data.shape} x {w.data.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ w.data.T)
        if w.requires_grad:
            gf = g.reshape(-1, w.data.shape[1])
            af = a.data.reshape(-1, w.data.shape[0])
            w._accum(af.T @ gf)

    return _make(a.data @ w.data, (a, w), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# padding and convolutions
# ---------------------------------------------------------------------------


def _np_pad2d(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    spec = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(x, spec, mode="edge" if mode == "replicate" else "constant")


def _np_pad2d_adjoint(g: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    """Adjoint of _np_pad2d: fold padded borders back onto the interior."""
    if ph == 0 and pw == 0:
        return g
    if mode == "replicate":
        g = g.copy()
        if ph:
            g[..., ph, :] += g[..., :ph, :].sum(axis=-2)
            g[..., -ph - 1, :] += g[..., -ph:, :].sum(axis=-2)
        if pw:
            g[..., :, pw] += g[..., :, :pw].sum(axis=-1)
            g[..., :, -pw - 1] += g[..., :, -pw:].sum(axis=-1)
    core = g[..., ph:g.shape[-2] - ph, pw:g.shape[-1] - pw]
    return np.ascontiguousarray(core)


def pad2d(x: Tensor, pads: tuple[int, int, int, int], mode: str = "zero") -> Tensor:
    """Pad the trailing two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise ValueError(f"pads must be non-negative, got {pads}")
    spec = [(0, 0)] * (x.data.ndim - 2) + [(top, bottom), (left, right)]
    out_data = np.pad(x.data, spec, mode="edge" if mode == "replicate" else "constant")

    def bw(g):
        gg = g
        if mode == "replicate":
            gg = g.copy()
            if top:
                gg[..., top, :] += gg[..., :top, :].sum(axis=-2)
            if bottom:
                gg[..., -bottom - 1, :] += gg[..., -bottom:, :].sum(axis=-2)
            if left:
                gg[..., :, left] += gg[..., :, :left].sum(axis=-1)
            if right:
                gg[..., :, -right - 1] += gg[..., :, -right:].sum(axis=-1)
        h, w = gg.shape[-2], gg.shape[-1]
        x._accum(np.ascontiguousarray(gg[..., top:h - bottom, left:w - right]))

    return _make(out_data, (x,), bw)


def crop2d(x: Tensor, hw: tuple[int, int]) -> Tensor:
    """Keep the top-left (h, w) corner of the trailing two axes."""
    h, w = hw
    shape = x.data.shape

    def bw(g):
        buf = np.zeros(shape, dtype=np.float32)
        buf[..., :h, :w] = g
        x._accum(buf)

    return _make(np.ascontiguousarray(x.data[..., :h, :w]), (x,), bw)


def _check_conv_geometry(hp, wp, kh, kw, stride):
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if kh > hp or kw > wp:
        raise ValueError(f"kernel ({kh},{kw}) larger than padded input ({hp},{wp})")


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int,
            ho: int | None = None, wo: int | None = None) -> np.ndarray:
    t, c, hp, wp = xp.shape
    if ho is None:
        ho = (hp - kh) // s + 1
        wo = (wp - kw) // s + 1
    cols = np.empty((t, c, kh, kw, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols


def _col2im(dcols: np.ndarray, shape, s: int) -> np.ndarray:
    t, c, hp, wp = shape
    _, _, kh, kw, ho, wo = dcols.shape
    dxp = np.zeros(shape, dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of x[T, Cin, H, W] with kernels[Cout, Cin, kh, kw]."""
    co, ci, kh, kw = kernels.data.shape
    if x.data.shape[1] != ci:
        raise ValueError(f"conv2d channels: input {x.data.shape[1]} != kernel {ci}")
    xp = _np_pad2d(x.data, padding, padding, pad_mode)
    _check_conv_geometry(xp.shape[2], xp.shape[3], kh, kw, stride)
    cols = _im2col(xp, kh, kw, stride)
    t, _, _, _, ho, wo = cols.shape
    cols2 = cols.reshape(t, ci * kh * kw, ho * wo)
    kf = kernels.data.reshape(co, ci * kh * kw)
    out_data = np.einsum("ok,tkp->top", kf, cols2).reshape(t, co, ho, wo)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    def bw(g):
        gf = g.reshape(t, co, ho * wo)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if kernels.requires_grad:
            dk = np.einsum("top,tkp->ok", gf, cols2).reshape(co, ci, kh, kw)
            kernels._accum(dk)
        if x.requires_grad:
            dcols = np.einsum("ok,top->tkp", kf, gf)
            dcols = dcols.reshape(t, ci, kh, kw, ho, wo)
            dxp = _col2im(dcols, xp.shape, stride)
            x._accum(_np_pad2d_adjoint(dxp, padding, padding, pad_mode))

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out_data.astype(np.float32), inputs, bw)


def conv_transpose2d(y: Tensor, kernels: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0,
                     output_hw: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of conv2d with the same geometry (zero padding).

    Maps y[T, Cout, H', W'] to [T, Cin, H, W] with
    H = (H' - 1) * stride + kh - 2 * padding by default. When a strided conv
    did not consume its full padded extent the output size is ambiguous;
    ``output_hw`` pins it to the original input size in that case.
    """
    co, ci, kh, kw = kernels.data.shape
    if y.data.shape[1] != co:
        raise ValueError(f"conv_transpose2d channels: input {y.data.shape[1]} != kernel {co}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    t, _, ho, wo = y.data.shape
    if output_hw is None:
        h = (ho - 1) * stride + kh - 2 * padding
        w = (wo - 1) * stride + kw - 2 * padding
    else:
        h, w = output_hw
        if (h + 2 * padding - kh) // stride + 1 != ho or (w + 2 * padding - kw) // stride + 1 != wo:
            raise ValueError(f"output_hw {output_hw} inconsistent with input {(ho, wo)}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if h < 1 or w < 1:
        raise ValueError("padding too large for conv_transpose2d output")

    kf = kernels.data.reshape(co, ci * kh * kw)
    yf = y.data.reshape(t, co, ho * wo)
    dcols = np.einsum("ok,top->tkp", kf, yf).reshape(t, ci, kh, kw, ho, wo)
    xp = _col2im(dcols, (t, ci, hp, wp), stride)
    out_data = np.ascontiguousarray(xp[:, :, padding:hp - padding, padding:wp - padding])
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    def bw(g):
        gp = _np_pad2d(g, padding, padding, "zero")
        cols = _im2col(gp, kh, kw, stride, ho, wo)
        cols2 = cols.reshape(t, ci * kh * kw, ho * wo)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if kernels.requires_grad:
            dk = np.einsum("top,tkp->ok", yf, cols2).reshape(co, ci, kh, kw)
            kernels._accum(dk)
        if y.requires_grad:
            dy = np.einsum("ok,tkp->top", kf, cols2).reshape(t, co, ho, wo)
            y._accum(dy)

    inputs = (y, kernels) if bias is None else (y, kernels, bias)
    return _make(out_data.astype(np.float32), inputs, bw)


def depthwise_conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
                     pad_mode: str = "replicate") -> Tensor:
    """Per-channel (kh, kw) convolution, stride 1, 'same' output size."""
    c, kh, kw = kernels.data.shape
    if x.data.shape[1] != c:
        raise ValueError(f"depthwise channels: input {x.data.shape[1]} != kernel {c}")
    ph, pw = kh // 2, kw // 2
    xp = _np_pad2d(x.data, ph, pw, pad_mode)
    t, _, h, w = x.data.shape
    out_data = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out_data += kernels.data[None, :, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    def bw(g):
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if kernels.requires_grad:
            dk = np.empty_like(kernels.data)
            for i in range(kh):
                for j in range(kw):
                    dk[:, i, j] = (g * xp[:, :, i:i + h, j:j + w]).sum(axis=(0, 2, 3))
            kernels._accum(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + h, j:j + w] += kernels.data[None, :, i, j, None, None] * g
            x._accum(_np_pad2d_adjoint(dxp, ph, pw, pad_mode))

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out_data, inputs, bw)


def conv1d_depthwise(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Causal per-channel 1D convolution of x[L, D] with kernels[D, k].

    Output position l sees inputs l-k+1 .. l (front zero padding).
    """
    d, k = kernels.data.shape
    if x.data.shape[1] != d:
        raise ValueError(f"conv1d channels: input {x.data.shape[1]} != kernel {d}")
    length = x.data.shape[0]
    xp = np.concatenate([np.zeros((k - 1, d), dtype=np.float32), x.data], axis=0)
    out_data = np.zeros_like(x.data)
    for j in range(k):
        out_data += kernels.data[None, :, j] * xp[j:j + length]
    if bias is not None:
        out_data = out_data + bias.data[None, :]

    def bw(g):
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if kernels.requires_grad:
            dk = np.empty_like(kernels.data)
            for j in range(k):
                dk[:, j] = (g * xp[j:j + length]).sum(axis=0)
            kernels._accum(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[j:j + length] += kernels.data[None, :, j] * g
            x._accum(dxp[k - 1:])

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out_data, inputs, bw)


def group_conv1d(x: Tensor, weights: Tensor, bias: Tensor | None = None,
                 group_size: int = 3) -> Tensor:
    """Mix a flat channel vector within consecutive groups.

    x has G*group_size entries; weights[G, group_size, group_size] maps each
    group through its own small matrix. Mixing never crosses group borders.
    """
    n = x.data.shape[0]
    if x.data.ndim != 1 or n % group_size:
        raise ValueError(f"channel count {x.data.shape} not divisible by group size {group_size}")
    g_count = n // group_size
    if weights.data.shape != (g_count, group_size, group_size):
        raise ValueError(f"weights shape {weights.data.shape} != {(g_count, group_size, group_size)}")
    xg = x.data.reshape(g_count, group_size)
    out_data = np.einsum("gij,gj->gi", weights.data, xg).reshape(n)
    if bias is not None:
        out_data = out_data + bias.data

    def bw(g):
        gg = g.reshape(g_count, group_size)
        if bias is not None and bias.requires_grad:
            bias._accum(g)
        if weights.requires_grad:
            weights._accum(np.einsum("gi,gj->gij", gg, xg))
        if x.requires_grad:
            x._accum(np.einsum("gij,gi->gj", weights.data, gg).reshape(n))

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return _make(out_data.astype(np.float32), inputs, bw)


# ---------------------------------------------------------------------------
# normalization and pooling
# ---------------------------------------------------------------------------

NORM_EPS = 1e-5


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, axis=-1) -> Tensor:
    """Normalize to zero mean / unit variance over ``axis``, then affine.

    gamma/beta broadcast against x (shape them accordingly).
    """
    mu = mean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = mean(square(xc), axis=axis, keepdims=True)
    xhat = div(xc, sqrt(add(var, NORM_EPS)))
    return add(mul(xhat, gamma), beta)


def groupnorm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor) -> Tensor:
    """Group normalization over x[T, C, H, W]: statistics per (frame, group)."""
    t, c, h, w = x.data.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by {groups} groups")
    xg = reshape(x, (t, groups, c // groups * h * w))
    mu = mean(xg, axis=2, keepdims=True)
    xc = sub(xg, mu)
    var = mean(square(xc), axis=2, keepdims=True)
    xhat = reshape(div(xc, sqrt(add(var, NORM_EPS))), (t, c, h, w))
    return add(mul(xhat, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing spatial axes of x[..., H, W]."""
    return mean(x, axis=(-2, -1))


# ---------------------------------------------------------------------------
# selective-scan recurrence primitive
# ---------------------------------------------------------------------------


def ssm_recurrence(abar: Tensor, bx: Tensor, c: Tensor) -> Tensor:
    """Run h_l = abar_l * h_{l-1} + bx_l ; y_l[d] = <c_l, h_l[d]>.

    abar, bx are [L, D, S]; c is [L, S]; returns y[L, D]. The state history is
    kept for the backward pass. Raises NumericalError naming the first step
    whose state goes non-finite.
    """
    L, d, s = abar.data.shape
    if bx.data.shape != (L, d, s) or c.data.shape != (L, s):
        raise ValueError("ssm_recurrence shape mismatch")
    hs = np.empty((L, d, s), dtype=np.float32)
    h = np.zeros((d, s), dtype=np.float32)
    for l in range(L):
        h = abar.data[l] * h + bx.data[l]
        if not np.isfinite(np.sum(h)):
            raise NumericalError(f"non-finite SSM state at step {l}")
        hs[l] = h
    y = np.einsum("lds,ls->ld", hs, c.data)

    def bw(g):
        dh_next = np.zeros((d, s), dtype=np.float32)
        dabar = np.empty_like(hs) if abar.requires_grad else None
        dbx = np.empty_like(hs) if bx.requires_grad else None
        dc = np.empty((L, s), dtype=np.float32) if c.requires_grad else None
        for l in range(L - 1, -1, -1):
            dh = g[l][:, None] * c.data[l][None, :] + dh_next
            if dc is not None:
                dc[l] = hs[l].T @ g[l]
            if dabar is not None:
                h_prev = hs[l - 1] if l > 0 else 0.0
                dabar[l] = dh * h_prev
            if dbx is not None:
                dbx[l] = dh
            dh_next = dh * abar.data[l]
        if dabar is not None:
            abar._accum(dabar)
        if dbx is not None:
            bx._accum(dbx)
        if dc is not None:
            c._accum(dc)

    return _make(y.astype(np.float32), (abar, bx, c), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_input: int
    worst_index: tuple
    passed: bool


def grad_check(f, xs, tolerance: float = 1e-3, step: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    ``xs`` is a Tensor or list of Tensors; every element of every input is
    perturbed by ``step``. Relative error is guarded by max(|a|, |n|, 1).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        x.requires_grad = True
        x.zero_grad()
    with Tape() as tape:
        out = f(*xs)
        tape.backward(out)
    analytic = []
    for x in xs:
        if x.grad is None:
            raise ValueError("input did not receive a gradient")
        if not np.isfinite(x.grad).all():
            raise NumericalError("NaN/Inf in tape gradient")
        analytic.append(x.grad.copy())

    worst = (0.0, 0, ())
    for i, x in enumerate(xs):
        flat = x.data.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(f(*xs).data)
            flat[j] = orig - step
            fm = float(f(*xs).data)
            flat[j] = orig
            num[j] = (fp - fm) / (2.0 * step)
        if not np.isfinite(num).all():
            raise NumericalError("NaN/Inf in numeric gradient")
        a = analytic[i].reshape(-1)
        rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1.0)
        j = int(np.argmax(rel))
        if rel[j] > worst[0]:
            worst = (float(rel[j]), i, np.unravel_index(j, x.data.shape))
    return GradCheckReport(worst[0], worst[1], worst[2], worst[0] < tolerance)


# ---------------------------------------------------------------------------
# checkpoint container: named float32 tensors
# ---------------------------------------------------------------------------


def save_params(path, params: dict[str, Tensor]) -> None:
    """Write a flat named-tensor container.

    Header: u64 entry count, then per entry u64 name length, UTF-8 name,
    u64 ndim, u64 dims. Payloads follow as little-endian float32 in header
    order.
    """
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            f.write(struct.pack("<Q", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        for t in params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_params(path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError("truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    (count,) = struct.unpack("<Q", take(8))
    shapes = []
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        shapes.append((name, dims))
    params = {}
    for name, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
        params[name] = Tensor(arr, requires_grad=True)
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return params
