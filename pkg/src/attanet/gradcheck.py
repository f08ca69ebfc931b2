"""Central finite-difference validation of every taped operation.

Each case builds random float64 inputs, reduces the op's output to a scalar
with a fixed random weighting, and compares the tape gradient against
``(f(x + eps) - f(x - eps)) / (2 eps)``. The error is norm-wise,
``max|analytic - numeric| / max(max|analytic|, max|numeric|)``, so tiny
gradient entries cannot inflate it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .afm import AfmParams, afm_forward
from .model import ModelConfig, init_model, joint_loss, model_forward, trainable_parameters
from .nn import (
    HORIZONTAL,
    VERTICAL,
    BNParams,
    ConvParams,
    batch_norm,
    bilinear_upsample,
    conv2d,
    cross_entropy,
    global_avg_pool,
    relu,
    replace_tensor,
    sigmoid,
    softmax_rows,
    strip_pool,
)
from .sam import SamParams, sam_forward
from .tensor import (
    Tape,
    Tensor,
    add,
    add_scalar,
    backward,
    concat_channels,
    matmul,
    mean_all,
    mul,
    reshape,
    scale,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "EPS",
    "PRIMITIVE_TOL",
    "COMPOSITE_TOL",
    "GradCase",
    "CaseResult",
    "relative_error",
    "check_case",
    "primitive_cases",
    "composite_cases",
    "run_gradcheck",
]

EPS = 1e-5
PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-5

Inputs = dict[str, np.ndarray]
LossFn = Callable[[dict[str, Tensor]], Tensor]


@dataclass
class GradCase:
    """Inputs plus a scalar-valued function of them.

    ``samples`` caps how many coordinates per input are perturbed
    (``None`` checks all of them).
    """

    inputs: Inputs
    loss: LossFn
    samples: int | None = None


@dataclass(frozen=True)
class CaseResult:
    op: str
    max_rel_error: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor, 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)


def _evaluate(loss: LossFn, arrays: Inputs) -> float:
    return float(loss({k: Tensor(v) for k, v in arrays.items()}).data.item())


def check_case(case: GradCase, rng: np.random.Generator, eps: float = EPS) -> float:
    """Norm-wise relative error over the concatenated gradient of all inputs.

    Treating the inputs as one vector keeps structurally zero blocks (for
    instance a key bias, which softmax cancels) from turning rounding noise
    into a 100% error.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in case.inputs.items()}
    with Tape() as tape:
        out = case.loss(leaves)
    grads = backward(tape, out)

    analytic_parts, numeric_parts, scale_ = [], [], 0.0
    for name, base in case.inputs.items():
        analytic = grads[leaves[name].id].data.reshape(-1)
        scale_ = max(scale_, np.abs(analytic).max(initial=0.0))
        flat = base.reshape(-1)
        if case.samples is None or case.samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=case.samples, replace=False)
        numeric = np.empty(coords.size)
        for j, idx in enumerate(coords):
            values = []
            for step in (eps, -eps):
                bumped = flat.copy()
                bumped[idx] += step
                arrays = dict(case.inputs)
                arrays[name] = bumped.reshape(base.shape)
                values.append(_evaluate(case.loss, arrays))
            numeric[j] = (values[0] - values[1]) / (2 * eps)
        analytic_parts.append(analytic[coords])
        numeric_parts.append(numeric)
    # sampled coordinates are judged against the scale of the whole gradient
    return relative_error(np.concatenate(analytic_parts), np.concatenate(numeric_parts), scale_)


# --------------------------------------------------------------------------
# Case builders


def _shape(rng: np.random.Generator, max_shape=(2, 4, 8, 8)) -> tuple[int, int, int, int]:
    return tuple(int(rng.integers(1, m + 1)) for m in max_shape)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-2) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def _unary(rng, fn, x: np.ndarray) -> GradCase:
    probe = fn(Tensor(x))
    w = rng.standard_normal(probe.shape)
    return GradCase({"x": x}, lambda t: _weighted(fn(t["x"]), w))


def _binary(rng, fn, a: np.ndarray, b: np.ndarray) -> GradCase:
    probe = fn(Tensor(a), Tensor(b))
    w = rng.standard_normal(probe.shape)
    return GradCase({"a": a, "b": b}, lambda t: _weighted(fn(t["a"], t["b"]), w))


def _broadcast_partner(rng, shape) -> tuple[int, ...]:
    # collapse a random subset of axes to 1 to exercise broadcasting
    return tuple(1 if rng.random() < 0.3 else s for s in shape)


def _case_add(rng):
    s = _shape(rng)
    return _binary(rng, add, rng.standard_normal(s), rng.standard_normal(_broadcast_partner(rng, s)))


def _case_sub(rng):
    s = _shape(rng)
    return _binary(rng, sub, rng.standard_normal(_broadcast_partner(rng, s)), rng.standard_normal(s))


def _case_mul(rng):
    s = _shape(rng)
    return _binary(rng, mul, rng.standard_normal(s), rng.standard_normal(_broadcast_partner(rng, s)))


def _case_scale(rng):
    k = float(rng.standard_normal())
    return _unary(rng, lambda x: scale(x, k), rng.standard_normal(_shape(rng)))


def _case_add_scalar(rng):
    k = float(rng.standard_normal())
    return _unary(rng, lambda x: add_scalar(x, k), rng.standard_normal(_shape(rng)))


def _case_reshape(rng):
    n, c, h, w = _shape(rng)
    return _unary(rng, lambda x: reshape(x, (n, 1, c * h, w)), rng.standard_normal((n, c, h, w)))


def _case_transpose(rng):
    axes = tuple(int(a) for a in rng.permutation(4))
    return _unary(rng, lambda x: transpose(x, axes), rng.standard_normal(_shape(rng)))


def _case_concat(rng):
    n, c, h, w = _shape(rng)
    c2 = int(rng.integers(1, 5))
    return _binary(
        rng,
        lambda a, b: concat_channels([a, b]),
        rng.standard_normal((n, c, h, w)),
        rng.standard_normal((n, c2, h, w)),
    )


def _case_matmul(rng):
    n, c, m, k = _shape(rng)
    p = int(rng.integers(1, 9))
    return _binary(rng, matmul, rng.standard_normal((n, c, m, k)), rng.standard_normal((n, c, k, p)))


def _case_sum_all(rng):
    return GradCase({"x": rng.standard_normal(_shape(rng))}, lambda t: sum_all(t["x"]))


def _case_mean_all(rng):
    return GradCase({"x": rng.standard_normal(_shape(rng))}, lambda t: mean_all(t["x"]))


def _conv_case(rng, kernel: int, stride: int, bias: bool = True) -> GradCase:
    n, c, h, w = _shape(rng)
    h, w = max(h, kernel), max(w, kernel)
    c_out = int(rng.integers(1, 5))
    pad = kernel // 2
    inputs = {
        "x": rng.standard_normal((n, c, h, w)),
        "weight": rng.standard_normal((c_out, c, kernel, kernel)),
    }
    if bias:
        inputs["bias"] = rng.standard_normal((1, c_out, 1, 1))

    def run(t):
        return conv2d(t["x"], ConvParams(t["weight"], t.get("bias"), stride, pad))

    probe = run({k: Tensor(v) for k, v in inputs.items()})
    wts = rng.standard_normal(probe.shape)
    return GradCase(inputs, lambda t: _weighted(run(t), wts))


def _bn_case(rng, training: bool) -> GradCase:
    n, c, h, w = _shape(rng)
    if training and n * h * w < 2:
        h = 2
    mean = rng.standard_normal((1, c, 1, 1))
    var = rng.uniform(0.5, 2.0, (1, c, 1, 1))
    inputs = {
        "x": rng.standard_normal((n, c, h, w)) * 2 + 0.5,
        "gamma": rng.uniform(0.5, 1.5, (1, c, 1, 1)),
        "beta": rng.standard_normal((1, c, 1, 1)),
    }
    wts = rng.standard_normal((n, c, h, w))

    def loss(t):
        p = BNParams(t["gamma"], t["beta"], Tensor(mean), Tensor(var))
        return _weighted(batch_norm(t["x"], p, training), wts)

    return GradCase(inputs, loss)


def _case_strip(rng, direction: str):
    return _unary(rng, lambda x: strip_pool(x, direction), rng.standard_normal(_shape(rng)))


def _case_upsample(rng):
    n, c, h, w = _shape(rng, (2, 3, 6, 6))
    factor = int(rng.integers(1, 5))
    return _unary(rng, lambda x: bilinear_upsample(x, h * factor, w * factor), rng.standard_normal((n, c, h, w)))


def _case_softmax(rng):
    return _unary(rng, softmax_rows, rng.standard_normal(_shape(rng)) * 2)


def _case_cross_entropy(rng):
    n, k, h, w = _shape(rng)
    k = max(k, 2)
    labels = rng.integers(0, k, (n, h, w))
    ignore = rng.random((n, h, w)) < 0.2
    ignore.flat[0] = False
    labels = np.where(ignore, 255, labels)
    return GradCase({"logits": rng.standard_normal((n, k, h, w)) * 2}, lambda t: cross_entropy(t["logits"], labels))


PRIMITIVES: dict[str, Callable[[np.random.Generator], GradCase]] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "add_scalar": _case_add_scalar,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat_channels": _case_concat,
    "matmul": _case_matmul,
    "sum_all": _case_sum_all,
    "mean_all": _case_mean_all,
    "conv2d_1x1": lambda rng: _conv_case(rng, 1, 1),
    "conv2d_3x3": lambda rng: _conv_case(rng, 3, 1),
    "conv2d_3x3_stride2": lambda rng: _conv_case(rng, 3, 2, bias=False),
    "batch_norm_train": lambda rng: _bn_case(rng, True),
    "batch_norm_eval": lambda rng: _bn_case(rng, False),
    "relu": lambda rng: _unary(rng, relu, _away_from_zero(rng, _shape(rng))),
    "sigmoid": lambda rng: _unary(rng, sigmoid, rng.standard_normal(_shape(rng)) * 3),
    "strip_pool_vertical": lambda rng: _case_strip(rng, VERTICAL),
    "strip_pool_horizontal": lambda rng: _case_strip(rng, HORIZONTAL),
    "global_avg_pool": lambda rng: _unary(rng, global_avg_pool, rng.standard_normal(_shape(rng))),
    "bilinear_upsample": _case_upsample,
    "softmax": _case_softmax,
    "cross_entropy": _case_cross_entropy,
}


def _conv_inputs(rng, prefix: str, c_in: int, c_out: int, kernel: int = 1, bias: bool = True) -> Inputs:
    out = {f"{prefix}.weight": rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / (c_in * kernel**2))}
    if bias:
        out[f"{prefix}.bias"] = rng.standard_normal((1, c_out, 1, 1)) * 0.1
    return out


def _conv_from(t: dict[str, Tensor], prefix: str, padding: int = 0) -> ConvParams:
    return ConvParams(t[f"{prefix}.weight"], t.get(f"{prefix}.bias"), 1, padding)


def _sam_case(rng, direction: str) -> GradCase:
    n, c, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
    cr = max(1, c // 4)
    inputs = {"f": rng.standard_normal((n, c, h, w))}
    inputs |= _conv_inputs(rng, "q", c, cr) | _conv_inputs(rng, "k", c, cr, bias=False) | _conv_inputs(rng, "v", c, c)
    wts = rng.standard_normal((n, c, h, w))

    def loss(t):
        p = SamParams(_conv_from(t, "q"), _conv_from(t, "k"), _conv_from(t, "v"), direction)
        return _weighted(sam_forward(t["f"], p)[0], wts)

    return GradCase(inputs, loss, samples=24)


def _afm_case(rng) -> GradCase:
    n, c = 2, int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    factor = int(rng.integers(1, 3))
    c_low = int(rng.integers(1, 5))
    inputs = {
        "f_high": rng.standard_normal((n, c, h, w)),
        "f_low": rng.standard_normal((n, c_low, h * factor, w * factor)),
        "bn.gamma": rng.uniform(0.5, 1.5, (1, c, 1, 1)),
        "bn.beta": rng.standard_normal((1, c, 1, 1)),
    }
    inputs |= _conv_inputs(rng, "refine", c_low, c, 3, bias=False)
    inputs |= _conv_inputs(rng, "mix", 2 * c, c) | _conv_inputs(rng, "mask", c, c)
    wts = rng.standard_normal((n, c, h * factor, w * factor))
    stats = (Tensor(np.zeros((1, c, 1, 1))), Tensor(np.ones((1, c, 1, 1))))

    def loss(t):
        p = AfmParams(
            refine_low=_conv_from(t, "refine", padding=1),
            refine_bn=BNParams(t["bn.gamma"], t["bn.beta"], *stats),
            mix=_conv_from(t, "mix"),
            mask_head=_conv_from(t, "mask"),
        )
        return _weighted(afm_forward(t["f_high"], t["f_low"], p, training=True), wts)

    return GradCase(inputs, loss, samples=16)


GRADCHECK_MODEL = ModelConfig(stem_channels=4, stem_strides=(1, 1), stage_channels=(4, 8, 16))


def _model_case(rng) -> GradCase:
    config = ModelConfig(**{**GRADCHECK_MODEL.__dict__, "seed": int(rng.integers(0, 2**31))})
    params = init_model(config)
    size = config.output_stride * 2
    inputs = {"image": rng.uniform(0.0, 1.0, (2, config.in_channels, size, size))}
    for name, t in trainable_parameters(params):
        # non-trivial BN affine and biases so no gradient is structurally tiny
        inputs[name] = t.data + 0.1 * rng.standard_normal(t.shape)
    labels = rng.integers(0, config.num_classes, (2, size, size))

    def loss(t):
        for name, _ in trainable_parameters(params):
            replace_tensor(params, name, t[name])
        return joint_loss(model_forward(t["image"], params, training=True), labels, config.aux_weight)

    return GradCase(inputs, loss, samples=3)


COMPOSITES: dict[str, Callable[[np.random.Generator], GradCase]] = {
    "sam_vertical": lambda rng: _sam_case(rng, VERTICAL),
    "sam_horizontal": lambda rng: _sam_case(rng, HORIZONTAL),
    "afm": _afm_case,
    "full_model": _model_case,
}


def primitive_cases() -> list[str]:
    return list(PRIMITIVES)


def composite_cases() -> list[str]:
    return list(COMPOSITES)


def run_gradcheck(
    seed: int = 0,
    trials: int = 3,
    ops: list[str] | None = None,
    composite_trials: int | None = None,
) -> list[CaseResult]:
    """Check every primitive for ``trials`` random draws and every
    composite for ``composite_trials`` (default: ``trials``).

    Trial ``t`` of op ``name`` draws from a generator seeded by
    ``(seed, name, t)``, so results do not depend on which ops are selected.
    """
    composite_trials = trials if composite_trials is None else composite_trials
    results = []
    for table, tol, n_trials in (
        (PRIMITIVES, PRIMITIVE_TOL, trials),
        (COMPOSITES, COMPOSITE_TOL, composite_trials),
    ):
        for name, build in table.items():
            if ops is not None and name not in ops:
                continue
            worst = 0.0
            for t in range(n_trials):
                rng = np.random.default_rng([seed, _stable_hash(name), t])
                worst = max(worst, check_case(build(rng), rng))
            results.append(CaseResult(name, worst, tol, n_trials))
    return results


def _stable_hash(name: str) -> int:
    return int.from_bytes(name.encode(), "little") % (2**32)
