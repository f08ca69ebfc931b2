"""Serialization, Netpbm images, the synthetic strip dataset and config files.

Binary layouts (all integers little-endian)::

    tensor file   b"ATTN" | u32 version=1 | u32 ndim | ndim * u64 dims | f32 payload
    checkpoint    b"ATTC" | u32 version=1 | u32 count |
                  count * (u32 name_len | utf-8 name | tensor file body)

Tensors are float64 in memory and float32 on disk; saving rounds to the
nearest float32 and that rounding is part of the format.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelConfig, ModelParams, TrainSettings
from .nn import named_tensors, replace_tensor
from .tensor import Tensor

__all__ = [
    "FormatError",
    "ConfigError",
    "encode_tensor",
    "decode_tensor",
    "save_tensor",
    "load_tensor",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "read_ppm",
    "read_pgm",
    "write_ppm",
    "write_pgm",
    "colorize",
    "PALETTE",
    "SplitMix64",
    "Xoshiro256StarStar",
    "xoshiro_lanes",
    "ToySample",
    "gen_toy_dataset",
    "parse_config",
]

TENSOR_MAGIC = b"ATTN"
CHECKPOINT_MAGIC = b"ATTC"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed binary or image data; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


# --------------------------------------------------------------------------
# Tensor files and checkpoints


def _tensor_body(t: Tensor) -> bytes:
    dims = t.shape
    head = struct.pack("<II", FORMAT_VERSION, len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    return head + t.data.astype("<f4").tobytes()


def encode_tensor(t: Tensor) -> bytes:
    return TENSOR_MAGIC + _tensor_body(t)


def _need(buf: bytes, offset: int, size: int, what: str) -> None:
    if offset + size > len(buf):
        raise FormatError(f"truncated {what}: need {size} bytes, {len(buf) - offset} left", offset)


def _decode_body(buf: bytes, offset: int) -> tuple[Tensor, int]:
    _need(buf, offset, 8, "tensor header")
    version, ndim = struct.unpack_from("<II", buf, offset)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset)
    if not 1 <= ndim <= 4:
        raise FormatError(f"ndim {ndim} outside 1..4", offset + 4)
    offset += 8
    _need(buf, offset, 8 * ndim, "dimension list")
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
    if min(dims) < 1:
        raise FormatError(f"zero extent in dims {dims}", offset)
    offset += 8 * ndim
    count = math.prod(dims)
    _need(buf, offset, 4 * count, "payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64)
    shape = (1,) * (4 - ndim) + tuple(int(d) for d in dims)
    return Tensor(data.reshape(shape)), offset + 4 * count


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one tensor file at ``offset``; returns the tensor and end offset."""
    _need(buf, offset, 4, "magic")
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {TENSOR_MAGIC!r}", offset)
    return _decode_body(buf, offset + 4)


def save_tensor(path: str | os.PathLike, t: Tensor) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: str | os.PathLike) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", end)
    return t


def encode_checkpoint(entries: Sequence[tuple[str, Tensor]]) -> bytes:
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names in checkpoint")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, t in entries:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, _tensor_body(t)]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, Tensor]:
    _need(buf, 0, 12, "checkpoint header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = 12
    out: dict[str, Tensor] = {}
    for _ in range(count):
        _need(buf, offset, 4, "name length")
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        _need(buf, offset, length, "name")
        try:
            name = bytes(buf[offset : offset + length]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"name is not UTF-8: {exc}", offset) from None
        if name in out:
            raise FormatError(f"duplicate entry {name!r}", offset)
        offset += length
        out[name], offset = _decode_body(buf, offset)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    return out


def save_checkpoint(path: str | os.PathLike, params: ModelParams) -> None:
    entries = [(name, t) for name, t, _ in named_tensors(params)]
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path: str | os.PathLike, params: ModelParams) -> ModelParams:
    """Fill ``params`` (a template with the right architecture) from ``path``."""
    stored = decode_checkpoint(Path(path).read_bytes())
    expected = {name: (t, buffer) for name, t, buffer in named_tensors(params)}
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise FormatError(f"checkpoint does not match model: missing={missing} unexpected={extra}", 0)
    for name, (old, buffer) in expected.items():
        t = stored[name]
        if t.shape != old.shape:
            raise FormatError(f"{name}: stored shape {t.shape}, model expects {old.shape}", 0)
        replace_tensor(params, name, Tensor(t.data, requires_grad=not buffer))
    return params


# --------------------------------------------------------------------------
# Netpbm


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return ``(width, height, maxval, payload_offset)`` of a binary netpbm file."""
    if buf[:2] != magic:
        raise FormatError(f"expected {magic.decode()} magic, found {bytes(buf[:2])!r}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("expected a decimal header field", start)
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("header must end with one whitespace byte", pos)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"bad image size {width}x{height}", 2)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 8-bit (255) is accepted", 2)
    return width, height, maxval, pos + 1


def _read_raster(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, _, offset = _parse_header(buf, magic)
    size = width * height * channels
    if len(buf) - offset < size:
        raise FormatError(f"truncated raster: need {size} bytes, {len(buf) - offset} left", offset)
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=offset).reshape(height, width, channels)


def read_ppm(path: str | os.PathLike) -> Tensor:
    """Binary P6 image as a ``(1, 3, h, w)`` tensor scaled to [0, 1]."""
    raster = _read_raster(path, b"P6", 3)
    return Tensor(raster.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Binary P5 image as a ``(h, w)`` uint8 array."""
    return _read_raster(path, b"P5", 1)[..., 0].copy()


def write_pgm(path: str | os.PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim == 3 and labels.shape[0] == 1:
        labels = labels[0]
    if labels.ndim != 2:
        raise ValueError(f"label map must be (h, w), got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in one byte")
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    """Write an ``(h, w, 3)`` uint8 array as binary P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected (h, w, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


PALETTE = np.array(
    [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ],
    dtype=np.uint8,
)


def colorize(labels: np.ndarray) -> np.ndarray:
    """Map a ``(h, w)`` class map to RGB with :data:`PALETTE` (cycled)."""
    labels = np.asarray(labels)
    return PALETTE[labels % len(PALETTE)]


# --------------------------------------------------------------------------
# Random numbers

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256StarStar:
    """xoshiro256** with its 256-bit state filled by four SplitMix64 outputs."""

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self.s = [sm.next() for _ in range(4)]

    def next(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """Double in [0, 1) from the top 53 bits."""
        return (self.next() >> 11) * 2.0**-53

    def randint(self, low: int, high: int) -> int:
        """Integer in ``[low, high]`` inclusive."""
        return low + int(self.uniform() * (high - low + 1))


def _splitmix_array(seeds: np.ndarray) -> np.ndarray:
    """Four SplitMix64 outputs per seed, shape ``(4, lanes)``."""
    state = seeds.astype(np.uint64)
    out = np.empty((4, state.size), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for i in range(4):
            state = state + np.uint64(_GOLDEN)
            z = state
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            out[i] = z ^ (z >> np.uint64(31))
    return out


def _rotl_array(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


def xoshiro_lanes(seeds: np.ndarray, steps: int) -> np.ndarray:
    """Run one xoshiro256** stream per seed in lockstep; returns ``(lanes, steps)`` uint64.

    Lane ``i`` produces exactly the sequence of ``Xoshiro256StarStar(seeds[i])``.
    """
    s0, s1, s2, s3 = _splitmix_array(np.asarray(seeds, dtype=np.uint64))
    out = np.empty((s0.size, steps), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for j in range(steps):
            out[:, j] = _rotl_array(s1 * np.uint64(5), 7) * np.uint64(9)
            t = s1 << np.uint64(17)
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = _rotl_array(s3, 45)
    return out


def _to_unit(x: np.ndarray) -> np.ndarray:
    return (x >> np.uint64(11)).astype(np.float64) * 2.0**-53


# --------------------------------------------------------------------------
# Synthetic strip dataset

TOY_SIZE = 64
TOY_NOISE = 0.05
BACKGROUND, VERTICAL_BAND, HORIZONTAL_BAND = 0, 1, 2


@dataclass
class ToySample:
    image: Tensor  # (1, 3, 64, 64) in [0, 1]
    labels: np.ndarray  # (1, 64, 64) uint8


def _band_color(rng: Xoshiro256StarStar, background: list[float]) -> list[float]:
    while True:
        color = [rng.uniform() for _ in range(3)]
        if max(abs(a - b) for a, b in zip(color, background)) >= 0.3:
            return color


def _toy_sample(seed: int, index: int) -> ToySample:
    sample_seed = SplitMix64((seed + index * 0xD1B54A32D192ED03) & _MASK).next()
    rng = Xoshiro256StarStar(sample_seed)
    size = TOY_SIZE

    background = [rng.uniform() for _ in range(3)]
    image = np.empty((3, size, size))
    image[:] = np.array(background)[:, None, None]
    labels = np.zeros((size, size), dtype=np.uint8)

    for _ in range(rng.randint(1, 2)):
        width = rng.randint(2, 8)
        top = rng.randint(0, size - width)
        image[:, top : top + width, :] = np.array(_band_color(rng, background))[:, None, None]
        labels[top : top + width, :] = HORIZONTAL_BAND
    for _ in range(rng.randint(1, 2)):
        width = rng.randint(2, 8)
        left = rng.randint(0, size - width)
        image[:, :, left : left + width] = np.array(_band_color(rng, background))[:, None, None]
        labels[:, left : left + width] = VERTICAL_BAND

    # Box-Muller noise: one stream per (channel, row), size/2 pairs each.
    lane_seeds = np.array([rng.next() for _ in range(3 * size)], dtype=np.uint64)
    u = _to_unit(xoshiro_lanes(lane_seeds, size))
    u1, u2 = 1.0 - u[:, 0::2], u[:, 1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    gauss = np.empty((3 * size, size))
    gauss[:, 0::2] = radius * np.cos(2.0 * np.pi * u2)
    gauss[:, 1::2] = radius * np.sin(2.0 * np.pi * u2)
    image = np.clip(image + TOY_NOISE * gauss.reshape(3, size, size), 0.0, 1.0)
    return ToySample(Tensor(image[None]), labels[None])


def gen_toy_dataset(n_samples: int, seed: int) -> list[ToySample]:
    """Images of coloured bands on a flat background with per-pixel labels.

    Sample ``i`` depends only on ``(seed, i)``. Its generator is
    xoshiro256** seeded (through SplitMix64) with the first SplitMix64 output
    of state ``seed + i * 0xD1B54A32D192ED03 mod 2**64``. Draw order:

    1. background RGB, three uniforms in [0, 1);
    2. 1-2 horizontal bands (class 2): width 2-8, top row, RGB colour
       redrawn until some channel differs from the background by >= 0.3;
    3. 1-2 vertical bands (class 1), drawn the same way over the horizontal
       ones, so class-1 columns span the full height;
    4. 192 lane seeds, one xoshiro256** stream per (channel, row) giving 64
       uniforms each; consecutive pairs become Box-Muller normals
       (cos, sin), scaled by 0.05, added and clipped to [0, 1].

    Uniform doubles use the top 53 bits; ``randint(a, b)`` is
    ``a + floor(u * (b - a + 1))``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return [_toy_sample(seed, i) for i in range(n_samples)]


# --------------------------------------------------------------------------
# Config files

_MODEL_KEYS = {
    "in_channels": "in_channels",
    "num_classes": "num_classes",
    "stem_channels": "stem_channels",
    "stem_strides": "stem_strides",
    "stage_channels": "stage_channels",
    "sam_direction": "sam_direction",
    "sam_reduction": "sam_reduction",
    "lambda": "aux_weight",
    "seed": "seed",
    "use_sam": "use_sam",
    "use_afm": "use_afm",
}
_TRAIN_KEYS = {
    "iters": "iters",
    "batch_size": "batch_size",
    "lr": "base_lr",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "power": "power",
    "log_every": "log_every",
    "hflip": "hflip",
}


def _convert(raw: str, target, line: int):
    try:
        if isinstance(target, bool):
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if isinstance(target, int):
            return int(raw)
        if isinstance(target, float):
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        if isinstance(target, tuple):
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(target).__name__}", line) from None


def parse_config(path: str | os.PathLike) -> tuple[ModelConfig, TrainSettings]:
    """Read ``key = value`` lines (``#`` starts a comment).

    Model keys: in_channels, num_classes, stem_channels, stem_strides and
    stage_channels (both comma separated), sam_direction, sam_reduction,
    lambda, seed, use_sam, use_afm. Trainer keys: iters, batch_size, lr, momentum, weight_decay,
    power, log_every, hflip. Missing keys keep their defaults (lambda 1,
    lr 1e-2, momentum 0.9, weight_decay 5e-4).
    """
    model_defaults = ModelConfig()
    train_defaults = TrainSettings()
    model_kw: dict = {}
    train_kw: dict = {}
    last_line: dict[str, int] = {}
    for lineno, raw_line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = raw_line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"expected 'key = value', got {text!r}", lineno)
        key, value = (part.strip() for part in text.split("=", 1))
        if key in _MODEL_KEYS:
            attr = _MODEL_KEYS[key]
            model_kw[attr] = _convert(value, getattr(model_defaults, attr), lineno)
        elif key in _TRAIN_KEYS:
            attr = _TRAIN_KEYS[key]
            train_kw[attr] = _convert(value, getattr(train_defaults, attr), lineno)
        else:
            raise ConfigError(f"unknown key {key!r}", lineno)
        last_line[attr] = lineno
    try:
        config = ModelConfig(**model_kw)
    except ValueError as exc:
        bad = next((a for a in model_kw if a in str(exc) or (a == "aux_weight" and "lambda" in str(exc))), None)
        raise ConfigError(str(exc), last_line.get(bad)) from None
    settings = TrainSettings(**train_kw)
    for f in fields(settings):
        value = getattr(settings, f.name)
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value < 0:
            raise ConfigError(f"{f.name} must be non-negative", last_line.get(f.name))
    return config, settings
