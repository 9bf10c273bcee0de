"""Minimal dense tensor with reverse-mode autodiff.

Feature maps use channels x height x width layout; a leading batch axis is
optional on the layer ops. Training runs in float32, gradient checking in
float64 (pass dtype at creation). Only the layer set needed by the cascade
backbone, the evidential losses and the baselines is implemented.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "log",
    "exp",
    "relu",
    "clip",
    "lgamma",
    "digamma",
    "tensor_sum",
    "tensor_mean",
    "stack",
    "reshape",
    "conv2d",
    "linear",
    "global_avg_pool",
    "softmax",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus an optional gradient buffer and backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node. Scalar outputs seed with 1."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; full semantics live in the module-level functions
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

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; scalars/arrays adopt the Tensor operand's dtype."""
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(data)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out)

    return _make(out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only strictly inside (lo, hi)."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * ((a.data > lo) & (a.data < hi)))

    return _make(out, (a,), backward)


def lgamma(a) -> Tensor:
    a = _as_tensor(a)
    out = _sp.gammaln(a.data).astype(a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * _sp.psi(a.data).astype(a.data.dtype))

    return _make(out, (a,), backward)


def digamma(a) -> Tensor:
    a = _as_tensor(a)
    out = _sp.psi(a.data).astype(a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * _sp.polygamma(1, a.data).astype(a.data.dtype))

    return _make(out, (a,), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _make(out, (a,), backward)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[ax] for ax in axes)
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(out, tensors, backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), backward)


class ShapeError(ValueError):
    """Dimension mismatch in a layer op; message names the offending axes."""


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(x, pad)


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding kh x kw views over the last two axes (stride 1)."""
    x = np.ascontiguousarray(x)
    *lead, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    strides = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(*lead, ho, wo, kh, kw),
        strides=(*strides[:-2], strides[-2], strides[-1], strides[-2], strides[-1]),
        writeable=False,
    )


def conv2d(x, weight, bias=None, groups: int = 1, padding: str = "same") -> Tensor:
    """2D cross-correlation, stride 1.

    x: (C_in, H, W) or (N, C_in, H, W); weight: (C_out, C_in/groups, kh, kw).
    groups=C_in with single-channel kernels gives a depthwise convolution.
    padding "same" needs odd kernels and preserves H, W; "valid" shrinks.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    bias = _as_tensor(bias, like=weight) if bias is not None else None
    squeeze_batch = x.ndim == 3
    xd = x.data[None] if squeeze_batch else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 3D or 4D, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4D, got shape {weight.shape}")
    n, ci, h, w = xd.shape
    co, cig, kh, kw = weight.shape
    if ci % groups != 0 or co % groups != 0:
        raise ShapeError(f"channels (in={ci}, out={co}) not divisible by groups={groups}")
    if cig != ci // groups:
        raise ShapeError(f"weight axis 1 is {cig}, expected C_in/groups = {ci // groups}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding needs odd kernels, got {kh}x{kw}")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
        if h < kh or w < kw:
            raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xp = _pad_hw(xd, ph, pw)
    win = _windows(xp, kh, kw)  # (N, Ci, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    win_g = win.reshape(n, groups, cig, ho, wo, kh, kw)
    w_g = weight.data.reshape(groups, co // groups, cig, kh, kw)
    out = np.einsum("ngihwuv,goiuv->ngohw", win_g, w_g, optimize=True)
    out = np.ascontiguousarray(out.reshape(n, co, ho, wo))
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if squeeze_batch:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze_batch else g
        g_g = gd.reshape(n, groups, co // groups, ho, wo)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gd.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            dw = np.einsum("ngihwuv,ngohw->goiuv", win_g, g_g, optimize=True)
            weight._accumulate(dw.reshape(co, cig, kh, kw))
        if x.requires_grad:
            gp = _pad_hw(gd, kh - 1, kw - 1)
            gwin = _windows(gp, kh, kw).reshape(
                n, groups, co // groups, h + 2 * ph, w + 2 * pw, kh, kw
            )
            wrot = w_g[..., ::-1, ::-1]
            dxp = np.einsum("ngohwuv,goiuv->ngihw", gwin, wrot, optimize=True)
            dxp = dxp.reshape(n, ci, h + 2 * ph, w + 2 * pw)
            dx = dxp[:, :, ph : ph + h, pw : pw + w]
            x._accumulate(dx[0] if squeeze_batch else dx)

    return _make(out, (x, weight, bias) if bias is not None else (x, weight), backward)


def linear(x, weight, bias=None) -> Tensor:
    """y = x @ weight.T + bias; x (..., in), weight (out, in)."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    bias = _as_tensor(bias, like=weight) if bias is not None else None
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear input features {x.shape[-1]} != weight in-features {weight.shape[1]}"
        )
    out = np.einsum("...i,oi->...o", x.data, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if weight.requires_grad:
            weight._accumulate(np.einsum("...o,...i->oi", g, x.data, optimize=True))
        if x.requires_grad:
            x._accumulate(np.einsum("...o,oi->...i", g, weight.data, optimize=True))

    return _make(out, (x, weight, bias) if bias is not None else (x, weight), backward)


def global_avg_pool(x) -> Tensor:
    """Adaptive pool to 1x1 over the spatial axes: (..., C, H, W) -> (..., C)."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs (..., C, H, W), got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h == 0 or w == 0:
        raise ShapeError(f"empty spatial extent {h}x{w}")
    out = x.data.mean(axis=(-2, -1))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g[..., None, None] / (h * w), x.shape).astype(x.dtype))

    return _make(out, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            x._accumulate(out * (g - dot))

    return _make(out, (x,), backward)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / fan_in), the ReLU-gain fan-in rule."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
