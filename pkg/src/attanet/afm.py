"""Attention Fusion Module: gated fusion of two adjacent feature levels.

The upsampled coarse map ``u`` and the refined fine map ``r`` are blended as
``u * alpha + r * (1 - alpha)`` with a per-channel gate ``alpha`` in (0, 1)
predicted from both levels by global pooling and a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    BNParams,
    ConvParams,
    batch_norm,
    bilinear_upsample,
    conv2d,
    global_avg_pool,
    init_bn,
    init_conv,
    relu,
    sigmoid,
)
from .tensor import ContractError, ShapeError, Tensor, add, add_scalar, concat_channels, mul, scale

__all__ = ["AfmParams", "init_afm", "afm_forward", "afm_mask"]


@dataclass
class AfmParams:
    """``mix`` and ``mask_head`` are ``None`` for an ungated fusion, which
    then requires a fixed ``alpha`` at call time."""

    refine_low: ConvParams
    refine_bn: BNParams
    mix: ConvParams | None = None
    mask_head: ConvParams | None = None

    def __post_init__(self) -> None:
        c = self.refine_low.c_out
        if self.refine_low.kernel != 3:
            raise ShapeError("refine_low must be a 3x3 convolution")
        if self.refine_bn.gamma.shape[1] != c:
            raise ShapeError("refine_bn width does not match refine_low")
        if (self.mix is None) != (self.mask_head is None):
            raise ContractError("mix and mask_head are either both present or both absent")
        if self.mix is not None:
            if self.mix.kernel != 1 or self.mix.c_in != 2 * c or self.mix.c_out != c:
                raise ShapeError(f"mix must be a 1x1 convolution {2 * c} -> {c}")
            if self.mask_head.kernel != 1 or self.mask_head.c_in != c or self.mask_head.c_out != c:
                raise ShapeError(f"mask_head must be a 1x1 convolution {c} -> {c}")

    @property
    def channels(self) -> int:
        return self.refine_low.c_out

    @property
    def gated(self) -> bool:
        return self.mix is not None


def init_afm(
    rng: np.random.Generator, channels: int, low_channels: int | None = None, gated: bool = True
) -> AfmParams:
    low = channels if low_channels is None else low_channels
    return AfmParams(
        refine_low=init_conv(rng, low, channels, 3, bias=False),
        refine_bn=init_bn(channels),
        mix=init_conv(rng, 2 * channels, channels, 1) if gated else None,
        mask_head=init_conv(rng, channels, channels, 1) if gated else None,
    )


def _branches(f_high: Tensor, f_low: Tensor, p: AfmParams, training: bool) -> tuple[Tensor, Tensor]:
    n, c, h, w = f_high.shape
    n2, _, h2, w2 = f_low.shape
    if n != n2:
        raise ShapeError(f"batch sizes differ: {n} vs {n2}")
    if c != p.channels:
        raise ShapeError(f"coarse input has {c} channels, module fuses {p.channels}")
    if h2 % h or w2 % w or h2 // h != w2 // w:
        raise ContractError(f"{h2}x{w2} is not an integer upsampling of {h}x{w}")
    u = bilinear_upsample(f_high, h2, w2)
    r = relu(batch_norm(conv2d(f_low, p.refine_low), p.refine_bn, training))
    return u, r


def _gate(u: Tensor, r: Tensor, p: AfmParams) -> Tensor:
    if not p.gated:
        raise ContractError("ungated fusion has no mask head; pass a fixed alpha")
    m = conv2d(concat_channels([u, r]), p.mix)
    return sigmoid(conv2d(global_avg_pool(m), p.mask_head))


def afm_mask(f_high: Tensor, f_low: Tensor, p: AfmParams, training: bool = False) -> Tensor:
    """The fusion gate alpha, shape ``(n, C, 1, 1)``.

    In training mode this updates the refinement batch-norm statistics, just
    as :func:`afm_forward` does.
    """
    u, r = _branches(f_high, f_low, p, training)
    return _gate(u, r, p)


def afm_forward(
    f_high: Tensor,
    f_low: Tensor,
    p: AfmParams,
    training: bool = False,
    alpha: Tensor | float | None = None,
) -> Tensor:
    """Fuse a coarse map with the next finer one.

    ``alpha`` overrides the predicted gate; a scalar is broadcast everywhere,
    a tensor must be ``(n, C, 1, 1)``.
    """
    u, r = _branches(f_high, f_low, p, training)
    if alpha is None:
        alpha = _gate(u, r, p)
    elif not isinstance(alpha, Tensor):
        n, c = u.shape[:2]
        alpha = Tensor(np.full((n, c, 1, 1), float(alpha)))
    return add(mul(u, alpha), mul(r, add_scalar(scale(alpha, -1.0), 1.0)))
