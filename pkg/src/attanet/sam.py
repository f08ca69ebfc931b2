"""Strip Attention Module and a brute-force non-local reference.

Queries stay per-pixel while keys and values are averaged along one spatial
axis, so the attention map has one row per pixel and one column per strip:
``(h*w) x w`` for vertical striping, ``(h*w) x h`` for horizontal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import HORIZONTAL, VERTICAL, ConvParams, conv2d, init_conv, softmax_rows, strip_pool
from .tensor import ContractError, ShapeError, Tensor, add, flop_scope, matmul, reshape, transpose

__all__ = [
    "SamParams",
    "AttentionMap",
    "init_sam",
    "sam_forward",
    "naive_nonlocal_forward",
    "naive_strip_forward",
    "NONLOCAL_MAX_PIXELS",
]

NONLOCAL_MAX_PIXELS = 4096


@dataclass
class SamParams:
    proj_q: ConvParams
    proj_k: ConvParams
    proj_v: ConvParams
    direction: str = VERTICAL

    def __post_init__(self) -> None:
        if self.direction not in (VERTICAL, HORIZONTAL):
            raise ContractError(f"unknown striping direction {self.direction!r}")
        c = self.proj_v.c_in
        reduced = self.proj_q.c_out
        for name, conv in (("proj_q", self.proj_q), ("proj_k", self.proj_k), ("proj_v", self.proj_v)):
            if conv.kernel != 1 or conv.stride != 1 or conv.padding != 0:
                raise ShapeError(f"{name} must be a 1x1 stride-1 convolution")
            if conv.c_in != c:
                raise ShapeError(f"{name} reads {conv.c_in} channels, expected {c}")
        if self.proj_k.c_out != reduced:
            raise ShapeError("query and key projections must share their output width")
        if not reduced < c:
            raise ShapeError(f"reduced width {reduced} must be smaller than {c} channels")
        if self.proj_v.c_out != c:
            raise ShapeError("value projection must preserve the channel count")

    @property
    def channels(self) -> int:
        return self.proj_v.c_in

    @property
    def reduced(self) -> int:
        return self.proj_q.c_out


def init_sam(
    rng: np.random.Generator, channels: int, reduction: int = 8, direction: str = VERTICAL
) -> SamParams:
    reduced = max(1, channels // reduction)
    # A key bias shifts every logit of a query's row by the same amount,
    # which the softmax cancels, so the key projection carries none.
    return SamParams(
        proj_q=init_conv(rng, channels, reduced, 1),
        proj_k=init_conv(rng, channels, reduced, 1, bias=False),
        proj_v=init_conv(rng, channels, channels, 1),
        direction=direction,
    )


@dataclass(frozen=True)
class AttentionMap:
    """Per-image attention weights ``a`` of shape ``(n, h*w, strips)``."""

    a: np.ndarray
    direction: str

    def check(self, tol: float = 1e-10) -> None:
        rows = self.a.sum(axis=-1)
        if np.abs(rows - 1.0).max() > tol:
            raise AssertionError(f"attention rows deviate from 1 by {np.abs(rows - 1.0).max():.3e}")
        if self.a.min() < 0.0 or self.a.max() > 1.0:
            raise AssertionError("attention entries outside [0, 1]")


def sam_forward(f: Tensor, p: SamParams) -> tuple[Tensor, AttentionMap]:
    n, c, h, w = f.shape
    if c != p.channels:
        raise ShapeError(f"sam_forward: input has {c} channels, module expects {p.channels}")
    cr = p.reduced
    npix = h * w

    with flop_scope("projection"):
        q = conv2d(f, p.proj_q)
        k_full = conv2d(f, p.proj_k)
        v_full = conv2d(f, p.proj_v)
    with flop_scope("striping"):
        k = strip_pool(k_full, p.direction)
        v = strip_pool(v_full, p.direction)
    strips = w if p.direction == VERTICAL else h

    # queries (n, 1, N, C'); keys (n, 1, C', S); values (n, 1, S, C)
    q_mat = transpose(reshape(q, (n, cr, 1, npix)), (0, 2, 3, 1))
    k_mat = reshape(k, (n, 1, cr, strips))
    v_mat = transpose(reshape(v, (n, 1, c, strips)), (0, 1, 3, 2))

    with flop_scope("attention_map"):
        logits = matmul(q_mat, k_mat)
    with flop_scope("softmax"):
        attn = softmax_rows(logits)
    with flop_scope("aggregation"):
        ctx = matmul(attn, v_mat)  # (n, 1, N, C)
    ctx = reshape(transpose(ctx, (0, 3, 1, 2)), (n, c, h, w))
    with flop_scope("residual"):
        out = add(ctx, f)

    amap = AttentionMap(attn.data.reshape(n, npix, strips).copy(), p.direction)
    amap.check()
    return out, amap


def _project(conv: ConvParams, x: np.ndarray) -> np.ndarray:
    wm = conv.weight.data[:, :, 0, 0]
    b = np.zeros(conv.c_out) if conv.bias is None else conv.bias.data[0, :, 0, 0]
    return np.einsum("oc,cp->op", wm, x) + b[:, None]


def naive_strip_forward(f: Tensor, p: SamParams) -> Tensor:
    """Strip attention spelled out pixel by pixel, strip by strip."""
    n, c, h, w = f.shape
    if c != p.channels:
        raise ShapeError(f"naive_strip_forward: input has {c} channels, module expects {p.channels}")
    vertical = p.direction == VERTICAL
    strips, length = (w, h) if vertical else (h, w)

    out = np.empty(f.shape)
    for b in range(n):
        x = f.data[b].reshape(c, h * w)
        q = _project(p.proj_q, x).reshape(-1, h, w)
        k = _project(p.proj_k, x).reshape(-1, h, w)
        v = _project(p.proj_v, x).reshape(c, h, w)
        k_strip = np.zeros((k.shape[0], strips))
        v_strip = np.zeros((c, strips))
        for s in range(strips):
            for t in range(length):
                y, xx = (t, s) if vertical else (s, t)
                k_strip[:, s] += k[:, y, xx] / length
                v_strip[:, s] += v[:, y, xx] / length
        for y in range(h):
            for xx in range(w):
                logits = np.array([q[:, y, xx] @ k_strip[:, s] for s in range(strips)])
                weights = np.exp(logits - logits.max())
                weights /= weights.sum()
                ctx = np.zeros(c)
                for s in range(strips):
                    ctx += weights[s] * v_strip[:, s]
                out[b, :, y, xx] = ctx + f.data[b, :, y, xx]
    return Tensor(out)


def naive_nonlocal_forward(f: Tensor, p: SamParams) -> Tensor:
    """Full ``(h*w) x (h*w)`` dot-product attention with a residual sum.

    Deliberately written as explicit per-pixel loops; ``p.direction`` is
    ignored. Serves as a correctness oracle and the quadratic cost reference.
    """
    n, c, h, w = f.shape
    if h * w > NONLOCAL_MAX_PIXELS:
        raise ContractError(f"naive non-local attention refuses {h * w} > {NONLOCAL_MAX_PIXELS} pixels")
    if c != p.channels:
        raise ShapeError(f"naive_nonlocal_forward: input has {c} channels, module expects {p.channels}")

    out = np.empty(f.shape)
    for b in range(n):
        x = f.data[b].reshape(c, h * w)
        q, k, v = _project(p.proj_q, x), _project(p.proj_k, x), _project(p.proj_v, x)
        for j in range(h * w):
            logits = np.array([q[:, j] @ k[:, i] for i in range(h * w)])
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            ctx = np.zeros(c)
            for i in range(h * w):
                ctx += weights[i] * v[:, i]
            out[b, :, j // w, j % w] = ctx + x[:, j]
    return Tensor(out)
