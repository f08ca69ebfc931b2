"""Differentiable layers: convolution, batch norm, activations, pooling,
bilinear upsampling, row softmax and pixelwise cross-entropy.

All functions take and return :class:`~attanet.tensor.Tensor` values and
record themselves on the active tape.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, ShapeError, Tensor, _count, _record

__all__ = [
    "ConvParams",
    "BNParams",
    "init_conv",
    "init_bn",
    "conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "strip_pool",
    "global_avg_pool",
    "bilinear_upsample",
    "softmax_rows",
    "cross_entropy",
    "named_tensors",
    "replace_tensor",
    "IGNORE_INDEX",
]

IGNORE_INDEX = 255

VERTICAL = "vertical"
HORIZONTAL = "horizontal"


@dataclass
class ConvParams:
    """Weights ``(c_out, c_in, k, k)`` and bias ``(1, c_out, 1, 1)``.

    ``bias`` is ``None`` for convolutions feeding a batch norm, whose mean
    subtraction would cancel it.
    """

    weight: Tensor
    bias: Tensor | None
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        c_out, _, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 3):
            raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
        if self.bias is not None and self.bias.shape != (1, c_out, 1, 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {c_out} output channels")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor = dataclasses.field(metadata={"buffer": True})
    running_var: Tensor = dataclasses.field(metadata={"buffer": True})
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self) -> None:
        if (self.running_var.data < 0).any():
            raise ContractError("running_var must be non-negative")
        if not 0.0 < self.momentum < 1.0:
            raise ContractError(f"momentum {self.momentum} outside (0, 1)")


def init_conv(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    kernel: int = 1,
    stride: int = 1,
    padding: int | None = None,
    bias: bool = True,
) -> ConvParams:
    """Kaiming fan-in initialisation (std = sqrt(2 / fan_in)), zero bias."""
    fan_in = c_in * kernel * kernel
    w = rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in)
    if padding is None:
        padding = kernel // 2
    return ConvParams(
        Tensor(w, requires_grad=True),
        Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True) if bias else None,
        stride=stride,
        padding=padding,
    )


def init_bn(channels: int) -> BNParams:
    shape = (1, channels, 1, 1)
    return BNParams(
        gamma=Tensor(np.ones(shape), requires_grad=True),
        beta=Tensor(np.zeros(shape), requires_grad=True),
        running_mean=Tensor(np.zeros(shape)),
        running_var=Tensor(np.ones(shape)),
    )


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
    """Walk a parameter tree yielding ``(dotted_name, tensor, is_buffer)``.

    Dataclass fields are visited in declaration order, lists by index;
    ``None`` entries are skipped.
    """
    if obj is None:
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}{i}.")
        return
    if not dataclasses.is_dataclass(obj):
        return
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, Tensor):
            yield f"{prefix}{f.name}", value, bool(f.metadata.get("buffer"))
        elif dataclasses.is_dataclass(value) or isinstance(value, (list, tuple)):
            yield from named_tensors(value, f"{prefix}{f.name}.")


def replace_tensor(obj, name: str, value: Tensor) -> None:
    """Assign ``value`` at dotted path ``name`` inside a parameter tree."""
    *path, leaf = name.split(".")
    for part in path:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    old = getattr(obj, leaf)
    if not isinstance(old, Tensor) or old.shape != value.shape:
        raise ShapeError(f"{name}: cannot replace {getattr(old, 'shape', old)} with {value.shape}")
    setattr(obj, leaf, value)


# --------------------------------------------------------------------------
# Convolution


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation plus bias."""
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {p.c_in}")
    k, s, pad = p.kernel, p.stride, p.padding
    ho, wo = _out_extent(h, k, s, pad), _out_extent(w, k, s, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent {ho}x{wo} for input {h}x{w}")
    c_out = p.c_out
    wd = p.weight.data
    xd = x.data
    bias = 0.0 if p.bias is None else p.bias.data
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    _count("conv2d", 2 * n * c_out * c * k * k * ho * wo)

    if k == 1 and s == 1 and pad == 0:
        wm = wd.reshape(c_out, c)
        out = np.matmul(wm, xd.reshape(n, c, h * w)).reshape(n, c_out, h, w) + bias

        def grad_1x1(g):
            g3 = g.reshape(n, c_out, h * w)
            dx = np.matmul(wm.T, g3).reshape(xd.shape)
            dw = np.einsum("nop,ncp->oc", g3, xd.reshape(n, c, h * w)).reshape(wd.shape)
            return dx, dw, g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)

        return _record("conv2d", out, inputs, grad_1x1)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # columns laid out (n, c*k*k, ho*wo) so the product lands directly in NCHW
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    wm = wd.reshape(c_out, c * k * k)
    out = np.matmul(wm, cols).reshape(n, c_out, ho, wo) + bias

    def grad(g):
        g3 = g.reshape(n, c_out, ho * wo)
        dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        db = g3.sum(axis=(0, 2)).reshape(1, c_out, 1, 1)
        dcols = np.matmul(wm.T, g3).reshape(n, c, k, k, ho, wo)
        dxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dw, db

    return _record("conv2d", out, inputs, grad)


# --------------------------------------------------------------------------
# Normalisation and activations


def batch_norm(x: Tensor, p: BNParams, training: bool) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics over ``(n, h, w)`` are used and the
    running averages in ``p`` are replaced by their exponential moving
    update (unbiased variance). In eval mode the running statistics are used
    and ``p`` is left untouched.
    """
    c = x.shape[1]
    if p.gamma.shape != (1, c, 1, 1):
        raise ShapeError(f"batch_norm: {c} channels vs gamma {p.gamma.shape}")
    xd, gamma = x.data, p.gamma.data
    _count("batch_norm", 4 * xd.size)

    if training:
        m = xd.size // c
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + p.eps)
        xhat = xc * inv_std
        unbiased = var * m / (m - 1) if m > 1 else var
        mom = p.momentum
        p.running_mean = Tensor._wrap((1 - mom) * p.running_mean.data + mom * mu)
        p.running_var = Tensor._wrap((1 - mom) * p.running_var.data + mom * unbiased)

        def grad(g):
            dxhat = g * gamma
            dx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return dx, (g * xhat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)

    else:
        inv_std = 1.0 / np.sqrt(p.running_var.data + p.eps)
        xhat = (xd - p.running_mean.data) * inv_std

        def grad(g):
            return (
                g * gamma * inv_std,
                (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                g.sum(axis=(0, 2, 3), keepdims=True),
            )

    out = gamma * xhat + p.beta.data
    return _record("batch_norm", out, (x, p.gamma, p.beta), grad)


def _relu_backward(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return g * mask


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    _count("relu", out.size)
    return _record("relu", out, (x,), lambda g: (_relu_backward(g, mask),))


def _sigmoid_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and exactly antisymmetric about 0.5
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    _count("sigmoid", 4 * y.size)
    return _record("sigmoid", y, (x,), lambda g: (_sigmoid_backward(g, y),))


# --------------------------------------------------------------------------
# Pooling and resampling


def strip_pool(x: Tensor, direction: str) -> Tensor:
    """Average over a full-extent strip.

    ``vertical`` pools each column (window ``h x 1``) to shape ``(n, c, 1, w)``;
    ``horizontal`` pools each row (window ``1 x w``) to ``(n, c, h, 1)``.
    """
    if direction == VERTICAL:
        axis = 2
    elif direction == HORIZONTAL:
        axis = 3
    else:
        raise ContractError(f"unknown striping direction {direction!r}")
    size = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=True)
    _count("strip_pool", x.data.size - out.size)
    shape = x.shape
    return _record("strip_pool", out, (x,), lambda g: (np.broadcast_to(g / size, shape).copy(),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    _count("global_avg_pool", x.data.size - out.size)
    shape = x.shape
    return _record("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / (h * w), shape).copy(),))


@lru_cache(maxsize=128)
def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row ``i`` holds the linear weights producing output sample ``i``.

    Half-pixel centres (``align_corners=False``): output index ``i`` maps to
    source coordinate ``(i + 0.5) * in / out - 0.5``, clamped below at 0; the
    upper neighbour index is clamped to ``in - 1``.
    """
    m = np.zeros((out_size, in_size))
    ratio = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.flags.writeable = False
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ContractError(f"bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}")
    mh = interpolation_matrix(h, out_h)
    mw = interpolation_matrix(w, out_w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    _count("bilinear_upsample", 4 * n * c * out_h * out_w)
    return _record("bilinear_upsample", out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


# --------------------------------------------------------------------------
# Softmax and loss


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=3, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=3, keepdims=True)
    _count("softmax", 5 * y.size)

    def grad(g):
        return (y * (g - (g * y).sum(axis=3, keepdims=True)),)

    return _record("softmax", y, (x,), grad)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over pixels whose label is not ignored.

    ``logits`` is ``(n, classes, h, w)``; ``labels`` an integer array
    ``(n, h, w)``.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ContractError(f"labels outside [0, {k}) and not ignore_index={ignore_index}")
    count = int(valid.sum())
    if count == 0:
        raise ContractError("cross_entropy: every pixel is ignored")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    nll = np.log(se[:, 0]) - picked
    loss = float(nll[valid].sum()) / count
    _count("cross_entropy", 6 * logits.data.size)

    def grad(g):
        d = e / se
        np.put_along_axis(d, safe[:, None], np.take_along_axis(d, safe[:, None], axis=1) - 1.0, axis=1)
        d *= valid[:, None]
        return (d * (g.item() / count),)

    return _record("cross_entropy", np.full((1, 1, 1, 1), loss), (logits,), grad)
