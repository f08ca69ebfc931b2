"""Closed-form FLOP and attention-map size models for attention blocks.

Conventions, shared by every mechanism so they compare on equal terms:

* a multiply-add is 2 FLOPs, so a 1x1 convolution ``C_in -> C_out`` over
  ``P`` pixels costs ``2 * P * C_in * C_out`` (the bias add is absorbed);
* averaging ``L`` values costs ``L - 1`` additions (the 1/L scale is folded
  into the next product), so a strip mean over an axis of length 1 is free;
* softmax is budgeted at 5 FLOPs per logit;
* the residual sum costs one addition per output element.

``attention_flops`` is everything except the 1x1 projections: the extra work
a mechanism adds on top of producing its query/key/value maps. Mechanisms are
ranked on it.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

__all__ = [
    "FlopsReport",
    "flops_sam",
    "flops_nonlocal",
    "flops_rcca",
    "flops_ema",
    "compare_table",
    "Comparison",
    "format_table",
    "reports_to_csv",
    "CSV_HEADER",
]

CSV_HEADER = "mechanism,C,Cprime,H,W,projection,map,aggregation,total,map_elements"

SOFTMAX_FLOPS = 5


@dataclass(frozen=True)
class FlopsReport:
    mechanism: str
    C: int
    C_reduced: int
    H: int
    W: int
    projection_flops: int
    attention_map_flops: int
    aggregation_flops: int
    attention_map_elements: int
    pooling_flops: int = 0
    softmax_flops: int = 0
    residual_flops: int = 0
    iterations: int = 1

    def __post_init__(self) -> None:
        for name in (
            "projection_flops",
            "attention_map_flops",
            "aggregation_flops",
            "attention_map_elements",
            "pooling_flops",
            "softmax_flops",
            "residual_flops",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total_flops(self) -> int:
        return (
            self.projection_flops
            + self.pooling_flops
            + self.attention_map_flops
            + self.softmax_flops
            + self.aggregation_flops
            + self.residual_flops
        )

    @property
    def attention_flops(self) -> int:
        return self.total_flops - self.projection_flops

    @property
    def memory_bytes(self) -> int:
        """Attention-map footprint at 8 bytes per entry."""
        return 8 * self.attention_map_elements


def _check(*dims: int) -> tuple[int, ...]:
    """Validate and normalise to Python ints (numpy integers would leak into reports)."""
    if any(int(d) != d or d < 1 for d in dims):
        raise ValueError(f"dimensions must be positive integers, got {dims}")
    return tuple(int(d) for d in dims)


def _qkv_projection(pixels: int, c: int, cr: int) -> int:
    return 2 * pixels * c * (2 * cr + c)


def flops_sam(C: int, C_reduced: int, H: int, W: int, direction: str = "vertical") -> FlopsReport:
    C, C_reduced, H, W = _check(C, C_reduced, H, W)
    if direction == "vertical":
        strips, pooled = W, H
    elif direction == "horizontal":
        strips, pooled = H, W
    else:
        raise ValueError(f"unknown direction {direction!r}")
    n = H * W
    entries = n * strips
    return FlopsReport(
        mechanism=f"SAM-{direction}",
        C=C,
        C_reduced=C_reduced,
        H=H,
        W=W,
        projection_flops=_qkv_projection(n, C, C_reduced),
        pooling_flops=(pooled - 1) * strips * (C_reduced + C),
        attention_map_flops=2 * entries * C_reduced,
        softmax_flops=SOFTMAX_FLOPS * entries,
        aggregation_flops=2 * entries * C,
        residual_flops=n * C,
        attention_map_elements=entries,
    )


def flops_nonlocal(C: int, C_reduced: int, H: int, W: int) -> FlopsReport:
    C, C_reduced, H, W = _check(C, C_reduced, H, W)
    n = H * W
    entries = n * n
    return FlopsReport(
        mechanism="NL",
        C=C,
        C_reduced=C_reduced,
        H=H,
        W=W,
        projection_flops=_qkv_projection(n, C, C_reduced),
        attention_map_flops=2 * entries * C_reduced,
        softmax_flops=SOFTMAX_FLOPS * entries,
        aggregation_flops=2 * entries * C,
        residual_flops=n * C,
        attention_map_elements=entries,
    )


def flops_rcca(C: int, C_reduced: int, H: int, W: int, passes: int = 2) -> FlopsReport:
    """Recurrent criss-cross attention: ``passes`` full criss-cross blocks.

    Each position attends to the ``H + W - 1`` positions of its row and
    column; ``attention_map_elements`` is the per-pass map size.
    """
    C, C_reduced, H, W, passes = _check(C, C_reduced, H, W, passes)
    n = H * W
    entries = n * (H + W - 1)
    return FlopsReport(
        mechanism="RCCA",
        C=C,
        C_reduced=C_reduced,
        H=H,
        W=W,
        projection_flops=passes * _qkv_projection(n, C, C_reduced),
        attention_map_flops=passes * 2 * entries * C_reduced,
        softmax_flops=passes * SOFTMAX_FLOPS * entries,
        aggregation_flops=passes * 2 * entries * C,
        residual_flops=passes * n * C,
        attention_map_elements=entries,
        iterations=passes,
    )


def flops_ema(C: int, C_reduced: int, H: int, W: int, bases: int = 64, iters: int = 3) -> FlopsReport:
    """Expectation-maximisation attention with ``bases`` bases and ``iters`` rounds.

    Works at the full width ``C``; ``C_reduced`` is accepted for a uniform
    signature and only recorded. Per round: responsibilities (``N x bases``
    dot products of width C) and a softmax, then a base update of the same
    size. A final reconstruction maps the bases back to every pixel. The
    1x1 input and output convolutions count as projections.
    """
    C, C_reduced, H, W, bases, iters = _check(C, C_reduced, H, W, bases, iters)
    n = H * W
    entries = n * bases
    return FlopsReport(
        mechanism="EMA",
        C=C,
        C_reduced=C_reduced,
        H=H,
        W=W,
        projection_flops=2 * (2 * n * C * C),
        attention_map_flops=iters * 2 * entries * C,
        softmax_flops=iters * SOFTMAX_FLOPS * entries,
        aggregation_flops=iters * 2 * entries * C + 2 * entries * C,
        residual_flops=n * C,
        attention_map_elements=entries,
        iterations=iters,
    )


@dataclass
class Comparison:
    reports: list[FlopsReport]
    reference: str = "SAM-vertical"
    reductions: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ref = self[self.reference].attention_flops
        self.reductions = {
            r.mechanism: 100.0 * (1.0 - ref / r.attention_flops) for r in self.reports
        }

    def __getitem__(self, mechanism: str) -> FlopsReport:
        for r in self.reports:
            if r.mechanism == mechanism:
                return r
        raise KeyError(mechanism)

    def ratio(self, mechanism: str, baseline: str) -> float:
        return self[mechanism].attention_flops / self[baseline].attention_flops


def compare_table(
    C: int, C_reduced: int, H: int, W: int, bases: int = 64, iters: int = 3
) -> Comparison:
    """NL, RCCA, EMA and both SAM variants at one feature-map size.

    ``reductions[m]`` is the percentage by which vertical SAM's attention
    FLOPs fall below mechanism ``m``'s.
    """
    return Comparison(
        [
            flops_nonlocal(C, C_reduced, H, W),
            flops_rcca(C, C_reduced, H, W),
            flops_ema(C, C_reduced, H, W, bases, iters),
            flops_sam(C, C_reduced, H, W, "horizontal"),
            flops_sam(C, C_reduced, H, W, "vertical"),
        ]
    )


def format_table(comparison: Comparison) -> str:
    header = (
        f"{'mechanism':<16}{'attn GFLOPs':>12}{'total GFLOPs':>14}"
        f"{'map entries':>14}{'map MiB':>10}{'SAM saves':>11}"
    )
    lines = [header, "-" * len(header)]
    for r in comparison.reports:
        lines.append(
            f"{r.mechanism:<16}{r.attention_flops / 1e9:>12.4f}{r.total_flops / 1e9:>14.4f}"
            f"{r.attention_map_elements:>14d}{r.memory_bytes / 2**20:>10.2f}"
            f"{comparison.reductions[r.mechanism]:>10.1f}%"
        )
    return "\n".join(lines)


def reports_to_csv(reports: list[FlopsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for r in reports:
        writer.writerow(
            [
                r.mechanism,
                r.C,
                r.C_reduced,
                r.H,
                r.W,
                r.projection_flops,
                r.attention_map_flops,
                r.aggregation_flops,
                r.total_flops,
                r.attention_map_elements,
            ]
        )
    return buf.getvalue()
