"""Desk-scale AttaNet: eight-conv backbone, strip attention on the deepest
stage, attention fusion with the stage above it, and three supervised heads.

Resolution plan for an ``H x W`` input with the default stem::

    stem  (2 convs, stride 2 each)      1/4
    res3  (stride 2 + stride 1)         1/8   -> auxiliary head
    res4                                1/16  -> fine input of the fusion
    res5                                1/32  -> strip attention -> coarse input
    fusion -> refine conv -> principal head; fusion -> auxiliary head

All logits are bilinearly upsampled to ``H x W``. ``stem_strides`` can drop
the stem's downsampling; :data:`TOY_MODEL` uses ``(1, 1)`` so that 64x64
toy images are fused at 16x16 rather than 4x4, which is too coarse to
resolve bands a few pixels wide.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .afm import AfmParams, afm_forward, init_afm
from .nn import (
    VERTICAL,
    BNParams,
    ConvParams,
    batch_norm,
    bilinear_upsample,
    conv2d,
    cross_entropy,
    init_bn,
    init_conv,
    named_tensors,
    relu,
    replace_tensor,
)
from .sam import SamParams, init_sam, sam_forward
from .tensor import ContractError, Tape, Tensor, add, backward, scale

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "TrainSettings",
    "ModelParams",
    "init_model",
    "model_forward",
    "predict",
    "joint_loss",
    "poly_lr",
    "sgd_step",
    "train_toy",
    "TrainLog",
    "MiouResult",
    "confusion_matrix",
    "evaluate_miou",
    "trainable_parameters",
    "expected_parameter_count",
    "TrainingDiverged",
    "TOY_MODEL",
    "TOY_TRAIN",
]

@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 3
    stem_channels: int = 8
    stem_strides: tuple[int, int] = (2, 2)
    stage_channels: tuple[int, int, int] = (16, 24, 32)
    sam_direction: str = VERTICAL
    sam_reduction: int = 8
    aux_weight: float = 1.0
    seed: int = 0
    use_sam: bool = True
    use_afm: bool = True

    @property
    def output_stride(self) -> int:
        return self.stem_strides[0] * self.stem_strides[1] * 8

    def __post_init__(self) -> None:
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stem_strides = tuple(int(s) for s in self.stem_strides)
        if len(self.stem_strides) != 2 or not set(self.stem_strides) <= {1, 2}:
            raise ContractError(f"stem_strides must be two values from {{1, 2}}, got {self.stem_strides}")
        if len(self.stage_channels) != 3 or min(self.stage_channels) < 1:
            raise ContractError(f"stage_channels must be three positive widths, got {self.stage_channels}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.aux_weight < 0:
            raise ContractError("aux_weight (lambda) must be >= 0")
        if self.in_channels < 1 or self.stem_channels < 1 or self.sam_reduction < 1:
            raise ContractError("channel counts and sam_reduction must be positive")
        if self.sam_direction not in ("vertical", "horizontal"):
            raise ContractError(f"unknown sam_direction {self.sam_direction!r}")
        if self.use_sam and max(1, self.stage_channels[2] // self.sam_reduction) >= self.stage_channels[2]:
            raise ContractError("strip attention needs a reduced width below the res5 width")


@dataclass
class TrainSettings:
    iters: int = 2000
    batch_size: int = 8
    base_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    log_every: int = 50
    hflip: bool = True


TOY_MODEL = ModelConfig(stem_channels=4, stem_strides=(1, 1), stage_channels=(8, 16, 32))
TOY_TRAIN = TrainSettings(batch_size=4)


@dataclass
class ConvBN:
    conv: ConvParams
    bn: BNParams


@dataclass
class Head:
    hidden: ConvBN
    classifier: ConvParams


@dataclass
class ModelParams:
    config: ModelConfig
    stem: list[ConvBN]
    res3: list[ConvBN]
    res4: list[ConvBN]
    res5: list[ConvBN]
    sam: SamParams | None
    high_proj: ConvBN
    afm: AfmParams
    refine: ConvBN
    head_main: Head
    head_res3: Head
    head_afm: Head


def _conv_bn(rng, c_in, c_out, kernel=3, stride=1) -> ConvBN:
    return ConvBN(init_conv(rng, c_in, c_out, kernel, stride, bias=False), init_bn(c_out))


def _head(rng, c_in, classes) -> Head:
    return Head(_conv_bn(rng, c_in, c_in, 3), init_conv(rng, c_in, classes, 1))


def init_model(config: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    cs = config.stem_channels
    c3, c4, c5 = config.stage_channels
    return ModelParams(
        config=config,
        stem=[
            _conv_bn(rng, config.in_channels, cs, stride=config.stem_strides[0]),
            _conv_bn(rng, cs, cs, stride=config.stem_strides[1]),
        ],
        res3=[_conv_bn(rng, cs, c3, stride=2), _conv_bn(rng, c3, c3)],
        res4=[_conv_bn(rng, c3, c4, stride=2), _conv_bn(rng, c4, c4)],
        res5=[_conv_bn(rng, c4, c5, stride=2), _conv_bn(rng, c5, c5)],
        sam=init_sam(rng, c5, config.sam_reduction, config.sam_direction) if config.use_sam else None,
        high_proj=_conv_bn(rng, c5, c4, kernel=1),
        afm=init_afm(rng, c4, gated=config.use_afm),
        refine=_conv_bn(rng, c4, c4),
        head_main=_head(rng, c4, config.num_classes),
        head_res3=_head(rng, c3, config.num_classes),
        head_afm=_head(rng, c4, config.num_classes),
    )


def trainable_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    return [(name, t) for name, t, buffer in named_tensors(params) if not buffer]


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for a configuration."""
    k = config.num_classes
    cs = config.stem_channels
    c3, c4, c5 = config.stage_channels

    def cbn(c_in, c_out, kernel=3):
        return c_out * c_in * kernel * kernel + 2 * c_out

    def head(c):
        return cbn(c, c) + k * c + k

    total = cbn(config.in_channels, cs) + cbn(cs, cs)
    total += cbn(cs, c3) + cbn(c3, c3) + cbn(c3, c4) + cbn(c4, c4) + cbn(c4, c5) + cbn(c5, c5)
    if config.use_sam:
        cr = max(1, c5 // config.sam_reduction)
        total += (c5 * cr + cr) + c5 * cr + (c5 * c5 + c5)
    total += cbn(c5, c4, 1)
    total += cbn(c4, c4)  # fusion refine_low + its batch norm
    if config.use_afm:
        total += (2 * c4 * c4 + c4) + (c4 * c4 + c4)
    total += cbn(c4, c4)
    total += head(c4) + head(c3) + head(c4)
    return total


# --------------------------------------------------------------------------
# Forward


def _apply(layer: ConvBN, x: Tensor, training: bool) -> Tensor:
    return relu(batch_norm(conv2d(x, layer.conv), layer.bn, training))


def _apply_head(head: Head, x: Tensor, training: bool, size: tuple[int, int]) -> Tensor:
    logits = conv2d(_apply(head.hidden, x, training), head.classifier)
    return bilinear_upsample(logits, *size)


def model_forward(
    x: Tensor, params: ModelParams, training: bool = False
) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(principal, aux_res3, aux_fusion)`` logits at input resolution."""
    n, c, h, w = x.shape
    stride = params.config.output_stride
    if h % stride or w % stride:
        raise ContractError(f"input {h}x{w} is not divisible by the output stride {stride}")
    if c != params.config.in_channels:
        raise ContractError(f"input has {c} channels, model expects {params.config.in_channels}")

    feat = x
    for layer in params.stem:
        feat = _apply(layer, feat, training)
    stages = []
    for stage in (params.res3, params.res4, params.res5):
        for layer in stage:
            feat = _apply(layer, feat, training)
        stages.append(feat)
    res3, res4, res5 = stages

    top = sam_forward(res5, params.sam)[0] if params.sam is not None else res5
    top = _apply(params.high_proj, top, training)
    # Ungated fusion averages the two levels (the plain aggregation baseline).
    alpha = None if params.afm.gated else 0.5
    fused = afm_forward(top, res4, params.afm, training, alpha=alpha)

    size = (h, w)
    principal = _apply_head(params.head_main, _apply(params.refine, fused, training), training, size)
    aux_res3 = _apply_head(params.head_res3, res3, training, size)
    aux_fused = _apply_head(params.head_afm, fused, training, size)
    return principal, aux_res3, aux_fused


def predict(x: Tensor, params: ModelParams) -> np.ndarray:
    """Eval-mode class map ``(n, h, w)``."""
    return model_forward(x, params, training=False)[0].data.argmax(axis=1)


def joint_loss(
    logits: Sequence[Tensor], labels: np.ndarray, aux_weight: float = 1.0, parts: list | None = None
) -> Tensor:
    """Principal loss plus ``aux_weight`` times the two auxiliary losses.

    If ``parts`` is a list, the three cross-entropy values are appended to it.
    """
    principal, aux_res3, aux_fused = logits
    lp = cross_entropy(principal, labels)
    l3 = cross_entropy(aux_res3, labels)
    lf = cross_entropy(aux_fused, labels)
    if parts is not None:
        parts.extend(float(t.data.item()) for t in (lp, l3, lf))
    return add(lp, scale(add(l3, lf), aux_weight))


# --------------------------------------------------------------------------
# Optimisation


def poly_lr(iteration: int, max_iter: int, base_lr: float = 1e-2, power: float = 0.9) -> float:
    if not 0 <= iteration <= max_iter:
        raise ContractError(f"iteration {iteration} outside [0, {max_iter}]")
    if max_iter == 0:
        return base_lr
    return base_lr * (1.0 - iteration / max_iter) ** power


def sgd_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> ModelParams:
    """One momentum-SGD update, in place on ``params`` and ``velocity``.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    ``grads`` maps dotted parameter names to gradient arrays.
    """
    named = trainable_parameters(params)
    missing = [name for name, _ in named if name not in grads]
    if missing:
        raise ContractError(f"no gradient for {', '.join(missing)}")
    for name, t in named:
        g = np.asarray(grads[name], dtype=np.float64)
        v = velocity.get(name)
        v = g + weight_decay * t.data if v is None else momentum * v + g + weight_decay * t.data
        velocity[name] = v
        replace_tensor(params, name, Tensor._wrap(t.data - lr * v, requires_grad=True))
    return params


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def csv(self) -> str:
        lines = ["iter,loss,pixel_acc"]
        lines += [f"{i},{loss:.6f},{acc:.6f}" for i, loss, acc in self.rows]
        return "\n".join(lines) + "\n"


def stack_batch(samples) -> tuple[Tensor, np.ndarray]:
    images = np.concatenate([s.image.data for s in samples], axis=0)
    labels = np.concatenate([s.labels for s in samples], axis=0)
    return Tensor._wrap(images), labels


def loss_and_grads(
    params: ModelParams, images: Tensor, labels: np.ndarray, parts: list | None = None
) -> tuple[Tensor, dict[str, np.ndarray], Tensor]:
    """Train-mode forward and backward; returns (loss, grads by name, principal logits)."""
    with Tape() as tape:
        logits = model_forward(images, params, training=True)
        loss = joint_loss(logits, labels, params.config.aux_weight, parts)
    by_id = backward(tape, loss)
    grads = {}
    for name, t in trainable_parameters(params):
        g = by_id.get(t.id)
        grads[name] = np.zeros_like(t.data) if g is None else g.data
    return loss, grads, logits[0]


def train_toy(
    config: ModelConfig,
    dataset: Sequence,
    iters: int,
    seed: int = 0,
    settings: TrainSettings | None = None,
    on_log: Callable[[int, float, float], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Seeded SGD training with the poly schedule and deep supervision.

    Mini-batches are drawn with replacement from ``dataset`` using
    ``numpy.random.default_rng(seed)``; with ``settings.hflip`` each sample is
    mirrored left-right with probability 1/2. A row ``(iter, loss,
    pixel_acc)`` is logged every ``settings.log_every`` iterations and after
    the last one.
    """
    if not dataset:
        raise ContractError("dataset is empty")
    settings = settings or TrainSettings()
    params = init_model(config)
    rng = np.random.default_rng(seed)
    velocity: dict[str, np.ndarray] = {}
    history = TrainLog()

    for it in range(iters):
        idx = rng.integers(0, len(dataset), size=settings.batch_size)
        images, labels = stack_batch([dataset[i] for i in idx])
        if settings.hflip:
            flip = rng.random(settings.batch_size) < 0.5
            if flip.any():
                img = images.data.copy()
                img[flip] = img[flip][..., ::-1]
                labels = labels.copy()
                labels[flip] = labels[flip][..., ::-1]
                images = Tensor._wrap(img)

        parts: list[float] = []
        loss, grads, principal = loss_and_grads(params, images, labels, parts)
        value = float(loss.data.item())
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: total={value}, parts={parts}, "
                f"lr={poly_lr(it, iters, settings.base_lr, settings.power):.3e}"
            )
        history.losses.append(value)
        lr = poly_lr(it, iters, settings.base_lr, settings.power)
        sgd_step(params, grads, velocity, lr, settings.momentum, settings.weight_decay)

        done = it + 1
        if done % settings.log_every == 0 or done == iters:
            acc = float((principal.data.argmax(axis=1) == labels).mean())
            history.rows.append((done, value, acc))
            if on_log is not None:
                on_log(done, value, acc)
            log.debug("iter %d loss %.4f acc %.4f", done, value, acc)
    return params, history


# --------------------------------------------------------------------------
# Evaluation


@dataclass
class MiouResult:
    per_class: np.ndarray  # NaN for classes absent from prediction and truth
    miou: float
    pixel_acc: float
    confusion: np.ndarray


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int, ignore_index: int = 255) -> np.ndarray:
    """``cm[t, p]`` counts pixels of true class ``t`` predicted as ``p``."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    keep = truth != ignore_index
    idx = truth[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> MiouResult:
    cm = np.asarray(cm, dtype=np.int64)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    present = ~np.isnan(iou)
    miou = float(iou[present].mean()) if present.any() else float("nan")
    total = cm.sum()
    acc = float(inter.sum() / total) if total else float("nan")
    return MiouResult(iou, miou, acc, cm)


def evaluate_miou(params: ModelParams, dataset: Sequence, batch_size: int = 16) -> MiouResult:
    k = params.config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        images, labels = stack_batch(dataset[start : start + batch_size])
        cm += confusion_matrix(predict(images, params), labels, k)
    return miou_from_confusion(cm)
