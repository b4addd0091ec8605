"""Reverse-mode autodiff over dense float64 arrays.

Every trainable component in this package (conv backbones, attention heads,
crop regressors, embedding matrices) is composed from the ops defined here.
Three design constraints shape the module:

* float64 only -- finite-difference gradient checks need the headroom.
* deterministic -- identical inputs give bit-identical forwards and
  backwards; nothing iterates over sets or dicts with unstable order.
* eager finite checks -- an op that produces NaN/Inf raises immediately
  instead of letting the value poison a training run.
"""

from __future__ import annotations

import os
import struct
from contextlib import contextmanager
from itertools import count
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "EngineError",
    "ShapeError",
    "NonFiniteError",
    "BlobFormatError",
    "Tensor",
    "ComputationTape",
    "no_grad",
    "set_finite_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "select_column",
    "tsum",
    "tmean",
    "maximum",
    "relu",
    "sigmoid",
    "apply_pointwise",
    "conv2d",
    "fully_connected",
    "global_avg_pool",
    "avg_pool2d",
    "bilinear_resize",
    "l2_normalize",
    "softmax_cross_entropy",
    "window_sample",
    "grad_check",
    "write_tensor_blob",
    "read_tensor_blob",
]


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Operands do not have compatible shapes."""


class NonFiniteError(EngineError):
    """An operation produced or received NaN/Inf."""


class BlobFormatError(EngineError):
    """A tensor blob on disk is malformed."""


_finite_checks = True
_grad_enabled = True
_seq_counter = count()


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf detection; returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = enabled
    return previous


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense float64 array with a gradient slot.

    ``data`` is always a C-contiguous float64 ndarray and is treated as
    immutable once the tensor has been consumed by an op. ``grad`` is zeros
    for leaf parameters and is allocated lazily for intermediates during
    the backward pass; a tensor not on the path to the loss keeps an
    all-zero (or absent) gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_seq", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if _finite_checks and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._seq = next(_seq_counter)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def backward(self) -> None:
        ComputationTape(self).backward()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _result(name: str, data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable[[Tensor], None] | None) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.grad = None
    out._seq = next(_seq_counter)
    if _grad_enabled and backward is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = lambda: backward(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class ComputationTape:
    """Recorded ops reachable from one result, in recording order.

    Replaying the entries in reverse recording order visits every recorded
    op exactly once; recording order is creation order, so every consumer
    runs before its producers.
    """

    def __init__(self, result: Tensor):
        if result.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar result, got shape {result.data.shape}")
        if result._backward is None and not result.requires_grad:
            raise EngineError("result does not depend on any tensor requiring grad")
        self.result = result
        entries: list[Tensor] = []
        seen: set[int] = set()
        stack = [result]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                entries.append(t)
            stack.extend(t._parents)
        entries.sort(key=lambda t: t._seq)
        self.entries = entries

    def backward(self) -> None:
        _accum(self.result, np.ones_like(self.result.data))
        for t in reversed(self.entries):
            t._backward()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b.data.shape))

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad, b.data.shape))

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _result("mul", a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, -out.grad)

    return _result("neg", -a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape[1]} vs {b.data.shape[0]}")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ out.grad)

    return _result("matmul", a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.data.shape}")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad.T)

    return _result("transpose", a.data.T, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad.reshape(a.data.shape))

    return _result("reshape", a.data.reshape(shape), (a,), backward)


def select_column(a: Tensor, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor as a 1-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"select_column expects a 2-D tensor, got {a.data.shape}")
    if not 0 <= j < a.data.shape[1]:
        raise ShapeError(f"column {j} out of range for shape {a.data.shape}")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, j] = out.grad
            _accum(a, g)

    return _result("select_column", a.data[:, j].copy(), (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(out: Tensor) -> None:
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _result("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = _lift(a), _lift(b)
    take_a = a.data >= b.data

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * take_a, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * ~take_a, b.data.shape))

    return _result("maximum", np.maximum(a.data, b.data), (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # subgradient at exactly 0 is 0

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad * mask)

    return _result("relu", np.where(mask, a.data, 0.0), (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails: exp argument is always <= 0
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad * s * (1.0 - s))

    return _result("sigmoid", s, (a,), backward)


def apply_pointwise(kind: str, a: Tensor) -> Tensor:
    """Elementwise activation dispatch: ``sigmoid`` or ``relu``."""
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "relu":
        return relu(a)
    raise EngineError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# layer primitives


def conv2d(inp: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C_in,H,W] with [C_out,C_in,kH,kW]."""
    if inp.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got {inp.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D [C_out,C_in,kH,kW], got {kernel.data.shape}")
    n, c_in, h, w = inp.data.shape
    c_out, kc, kh, kw = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"kernel input channels {kc} != input channels {c_in}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded spatial extents {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    padded = np.pad(inp.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N,C_in,h_out,w_out,kh,kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * kh * kw)
    wmat = kernel.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ wmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    def backward(out_t: Tensor) -> None:
        gflat = out_t.grad.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        if kernel.requires_grad:
            _accum(kernel, (gflat.T @ cols).reshape(kernel.data.shape))
        if inp.requires_grad:
            dcols = (gflat @ wmat).reshape(n, h_out, w_out, c_in, kh, kw)
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)  # [N,C_in,h_out,w_out,kh,kw]
            dpad = np.zeros((n, c_in, hp, wp))
            for ki in range(kh):
                for kj in range(kw):
                    dpad[:, :, ki:ki + h_out * stride:stride,
                         kj:kj + w_out * stride:stride] += dcols[:, :, :, :, ki, kj]
            if padding:
                dpad = dpad[:, :, padding:padding + h, padding:padding + w]
            _accum(inp, dpad)

    return _result("conv2d", out, (inp, kernel), backward)


def fully_connected(inp: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [N,D_in] x [D_out,D_in] + [D_out] -> [N,D_out]."""
    if inp.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"fully_connected expects 2-D input/weight, got {inp.data.shape}/{weight.data.shape}")
    if inp.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"input features {inp.data.shape[1]} != weight features {weight.data.shape[1]}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(
            f"bias shape {bias.data.shape} != ({weight.data.shape[0]},)")

    def backward(out: Tensor) -> None:
        if inp.requires_grad:
            _accum(inp, out.grad @ weight.data)
        if weight.requires_grad:
            _accum(weight, out.grad.T @ inp.data)
        if bias.requires_grad:
            _accum(bias, out.grad.sum(axis=0))

    return _result("fully_connected", inp.data @ weight.data.T + bias.data,
                   (inp, weight, bias), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """Spatial mean of [N,C,H,W] -> [N,C]."""
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {a.data.shape}")
    n, c, h, w = a.data.shape

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            g = out.grad[:, :, None, None] / (h * w)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _result("global_avg_pool", a.data.mean(axis=(2, 3)), (a,), backward)


def avg_pool2d(a: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average downsampling of [N,C,H,W]."""
    if a.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects [N,C,H,W], got {a.data.shape}")
    n, c, h, w = a.data.shape
    if h % k or w % k:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by pool size {k}")
    ho, wo = h // k, w // k
    out = a.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def backward(out_t: Tensor) -> None:
        if a.requires_grad:
            g = out_t.grad[:, :, :, None, :, None] / (k * k)
            g = np.broadcast_to(g, (n, c, ho, k, wo, k)).reshape(n, c, h, w)
            _accum(a, g.copy())

    return _result("avg_pool2d", out, (a,), backward)


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners bilinear interpolation matrix [dst, src]."""
    m = np.zeros((dst, src))
    if dst == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m[np.arange(dst), lo] += 1.0 - frac
    m[np.arange(dst), hi] += frac
    return m


def bilinear_resize(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resampling of [N,C,H,W] to [N,C,out_h,out_w]."""
    if a.data.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [N,C,H,W], got {a.data.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output extents must be >= 1, got {out_h}x{out_w}")
    ry = _resize_matrix(a.data.shape[2], out_h)
    rx = _resize_matrix(a.data.shape[3], out_w)
    out = np.matmul(np.matmul(ry, a.data), rx.T)

    def backward(out_t: Tensor) -> None:
        if a.requires_grad:
            _accum(a, np.matmul(np.matmul(ry.T, out_t.grad), rx))

    return _result("bilinear_resize", out, (a,), backward)


def l2_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each row of [N,D] by max(row L2 norm, eps)."""
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize expects [N,D], got {a.data.shape}")
    norms = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = a.data / denom

    def backward(out_t: Tensor) -> None:
        if not a.requires_grad:
            return
        g = out_t.grad
        proj = (g * out).sum(axis=1, keepdims=True)
        full = (g - out * proj) / denom
        _accum(a, np.where(norms > eps, full, g / eps))

    return _result("l2_normalize", out, (a,), backward)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the true-class logit, max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.data.shape}")
    n, k = logits.data.shape
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError(f"labels length {idx.shape} != batch size {n}")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= k:
        raise ShapeError(f"label out of range [0,{k}) in {idx.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), idx].mean()

    def backward(out: Tensor) -> None:
        if logits.requires_grad:
            g = np.exp(logp)
            g[np.arange(n), idx] -= 1.0
            _accum(logits, g * (out.grad.reshape(()) / n))

    return _result("softmax_cross_entropy", np.asarray(loss), (logits,), backward)


def window_sample(image: Tensor, tx: Tensor, ty: Tensor, ts: Tensor,
                  out_size: int) -> Tensor:
    """Bilinear resample of a square window to [N,C,out,out].

    The window of side ``ts`` is centered at ``(tx, ty)`` (x = columns,
    y = rows, pixel centers at integer coordinates); samples are placed
    align-corners style across it and clamped to the image border.
    Differentiable w.r.t. the image and all three window parameters.
    """
    if image.data.ndim != 4:
        raise ShapeError(f"window_sample expects [N,C,S,S] image, got {image.data.shape}")
    n, c, h, w = image.data.shape
    for name, t in (("tx", tx), ("ty", ty), ("ts", ts)):
        if t.data.shape != (n,):
            raise ShapeError(f"{name} must have shape ({n},), got {t.data.shape}")
    if out_size < 2:
        raise ShapeError(f"out_size must be >= 2, got {out_size}")

    steps = np.arange(out_size) / (out_size - 1) - 0.5  # [-0.5, 0.5]
    gx = tx.data[:, None] + ts.data[:, None] * steps[None, :]  # [N, out]
    gy = ty.data[:, None] + ts.data[:, None] * steps[None, :]

    gxc = np.clip(gx, 0.0, w - 1.0)
    gyc = np.clip(gy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(gxc), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(gyc), h - 2).astype(np.int64)
    fx = gxc - x0  # [N, out]
    fy = gyc - y0

    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    y0i = y0[:, None, :, None]
    x0i = x0[:, None, None, :]
    i00 = image.data[ni, ci, y0i, x0i]
    i01 = image.data[ni, ci, y0i, x0i + 1]
    i10 = image.data[ni, ci, y0i + 1, x0i]
    i11 = image.data[ni, ci, y0i + 1, x0i + 1]

    fxb = fx[:, None, None, :]
    fyb = fy[:, None, :, None]
    top = i00 * (1.0 - fxb) + i01 * fxb
    bot = i10 * (1.0 - fxb) + i11 * fxb
    out = top * (1.0 - fyb) + bot * fyb

    def backward(out_t: Tensor) -> None:
        g = out_t.grad  # [N,C,out,out]
        if image.requires_grad:
            w00 = (1.0 - fyb) * (1.0 - fxb)
            w01 = (1.0 - fyb) * fxb
            w10 = fyb * (1.0 - fxb)
            w11 = fyb * fxb
            dimg = np.zeros_like(image.data)
            yb = np.broadcast_to(y0i, g.shape)
            xb = np.broadcast_to(x0i, g.shape)
            nb = np.broadcast_to(ni, g.shape)
            cb = np.broadcast_to(ci, g.shape)
            np.add.at(dimg, (nb, cb, yb, xb), g * w00)
            np.add.at(dimg, (nb, cb, yb, xb + 1), g * w01)
            np.add.at(dimg, (nb, cb, yb + 1, xb), g * w10)
            np.add.at(dimg, (nb, cb, yb + 1, xb + 1), g * w11)
            _accum(image, dimg)
        if tx.requires_grad or ty.requires_grad or ts.requires_grad:
            # d out / d gx, summed over channels; zero where the sample clamped
            dgx_img = (1.0 - fyb) * (i01 - i00) + fyb * (i11 - i10)
            dgy_img = (1.0 - fxb) * (i10 - i00) + fxb * (i11 - i01)
            live_x = ((gx > 0.0) & (gx < w - 1.0))[:, None, None, :]
            live_y = ((gy > 0.0) & (gy < h - 1.0))[:, None, :, None]
            dgx = (g * dgx_img * live_x).sum(axis=(1, 2))  # [N, out] over columns
            dgy = (g * dgy_img * live_y).sum(axis=(1, 3))  # [N, out] over rows
            if tx.requires_grad:
                _accum(tx, dgx.sum(axis=1))
            if ty.requires_grad:
                _accum(ty, dgy.sum(axis=1))
            if ts.requires_grad:
                _accum(ts, (dgx * steps[None, :]).sum(axis=1)
                       + (dgy * steps[None, :]).sum(axis=1))

    return _result("window_sample", out, (image, tx, ty, ts), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(function: Callable[[Tensor], Tensor], inp: Tensor,
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function`` must map ``inp`` to a deterministic scalar tensor. The
    input's data is perturbed in place element by element and restored.
    Relative error per element is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8).
    """
    inp.requires_grad = True
    inp.grad = np.zeros_like(inp.data)
    out = function(inp)
    if out.data.size != 1:
        raise ShapeError(f"grad_check function must be scalar-valued, got {out.data.shape}")
    ComputationTape(out).backward()
    analytic = inp.grad.ravel().copy()

    flat = inp.data.ravel()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = function(inp).item()
            flat[i] = orig - eps
            f_minus = function(inp).item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NonFiniteError("non-finite gradient encountered during grad_check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# tensor blob format: "SGMT" | version u32 | rank u32 | extents u64... | f64 data
# all little-endian

_BLOB_MAGIC = b"SGMT"
_BLOB_VERSION = 1


def write_tensor_blob(path: str, array) -> None:
    """Write an array to the flat binary checkpoint format, atomically."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array, dtype=np.float64)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = _BLOB_MAGIC + struct.pack("<II", _BLOB_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f8").tobytes())
    os.replace(tmp, path)


def read_tensor_blob(path: str) -> np.ndarray:
    """Read a tensor blob, validating magic, version, and payload length."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise BlobFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != _BLOB_MAGIC:
        raise BlobFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != _BLOB_VERSION:
        raise BlobFormatError(f"{path}: unsupported version {version}")
    if rank > 8:
        raise BlobFormatError(f"{path}: implausible rank {rank}")
    if len(raw) < 12 + 8 * rank:
        raise BlobFormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", raw, 12)
    offset = 12 + 8 * rank
    expected = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = raw[offset:]
    if len(payload) != expected * 8:
        raise BlobFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected * 8}")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return np.ascontiguousarray(data)
