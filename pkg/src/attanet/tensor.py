"""Rank-4 float64 tensors and a tape-based reverse-mode autodiff.

Every value is an ``(n, c, h, w)`` array stored row-major. Operations record
themselves on the innermost active :class:`Tape` whenever one of their inputs
requires a gradient; :func:`backward` then walks the tape in reverse.

    >>> x = Tensor([[[[1.0, 2.0]]]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    >>> backward(tape, loss)[x.id].data.ravel().tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import itertools
import sys
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "NonFiniteError",
    "Dims",
    "Tensor",
    "Tape",
    "FlopCounter",
    "count_flops",
    "flop_scope",
    "tensor_new",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "reshape",
    "transpose",
    "concat_channels",
    "matmul",
    "sum_all",
    "mean_all",
]


class ShapeError(ValueError):
    """Operand extents are incompatible with an operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf during a validated run."""


# Largest element count whose float64 buffer is still byte-addressable.
_MAX_ELEMENTS = sys.maxsize // 8


@dataclass(frozen=True)
class Dims:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self) -> None:
        for name in ("n", "c", "h", "w"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ShapeError(f"extent {name}={v!r} is not an integer")
            if v < 1:
                raise ShapeError(f"extent {name}={v} must be >= 1")
        # Python ints never overflow, so the product is exact.
        if self.n * self.c * self.h * self.w > _MAX_ELEMENTS:
            raise ShapeError(f"element count of {self.shape} overflows the address space")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (int(self.n), int(self.c), int(self.h), int(self.w))

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


_ids = itertools.count()


class Tensor:
    """Immutable rank-4 float64 value with a process-unique integer ``id``."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (n, c, h, w); got shape {arr.shape}")
        Dims(*arr.shape)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal constructor: takes ownership of a freshly computed array.
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        return t

    @property
    def dims(self) -> Dims:
        return Dims(*self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor_new(dims: Dims | Sequence[int], fill: float = 0.0) -> Tensor:
    if not isinstance(dims, Dims):
        dims = Dims(*dims)
    return Tensor._wrap(np.full(dims.shape, float(fill)))


# --------------------------------------------------------------------------
# Tape


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, which is a topological order by
    construction. A tape belongs to the thread that entered it.
    """

    check_finite: bool = False
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("tapes").pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack(name: str) -> list:
    s = getattr(_local, name, None)
    if s is None:
        s = []
        setattr(_local, name, s)
    return s


def active_tape() -> Tape | None:
    tapes = _stack("tapes")
    return tapes[-1] if tapes else None


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: BackwardFn) -> Tensor:
    tape = active_tape()
    if tape is not None and tape.check_finite and not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs_grad)
    if needs_grad:
        tape.nodes.append(Node(op, inputs, result, grad_fn))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Gradients of a single-element ``loss`` for every grad-requiring leaf.

    Returns a mapping from tensor id to gradient tensor. Leaves are tensors
    that appear as inputs on the tape without being produced by it.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must hold a single element, got shape {loss.shape}")
    produced = {node.output.id for node in tape.nodes}
    if loss.id not in produced:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        for t in node.inputs:
            if t.requires_grad and t.id not in produced:
                leaves[t.id] = t
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(f"{node.op} backward produced {gi.shape} for input {t.shape}")
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi

    out = {}
    for tid, t in leaves.items():
        g = grads.get(tid)
        out[tid] = Tensor._wrap(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64))
    return out


# --------------------------------------------------------------------------
# Operation counting


@dataclass
class FlopCounter:
    """Floating-point operations actually executed, keyed by op and by scope."""

    by_op: dict[str, int] = field(default_factory=dict)
    by_scope: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.by_op.values())


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _stack("counters").append(counter)
    try:
        yield counter
    finally:
        _stack("counters").pop()


@contextmanager
def flop_scope(name: str) -> Iterator[None]:
    scopes = _stack("scopes")
    scopes.append(name)
    try:
        yield
    finally:
        scopes.pop()


def _count(op: str, flops: int) -> None:
    counters = _stack("counters")
    if not counters:
        return
    scopes = _stack("scopes")
    scope = scopes[-1] if scopes else "unscoped"
    for c in counters:
        c.by_op[op] = c.by_op.get(op, 0) + int(flops)
        c.by_scope[scope] = c.by_scope.get(scope, 0) + int(flops)


# --------------------------------------------------------------------------
# Primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")
        shape.append(max(da, db))
    return tuple(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; size-1 axes broadcast."""
    shape = _broadcast_shape(a, b, "add")
    out = a.data + b.data
    _count("add", out.size)
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    _count("add", out.size)
    sa, sb = a.shape, b.shape
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; size-1 axes broadcast."""
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    _count("mul", out.size)
    return _record(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s
    _count("mul", out.size)
    return _record("scale", out, (x,), lambda g: (g * s,))


def add_scalar(x: Tensor, s: float) -> Tensor:
    out = x.data + float(s)
    _count("add", out.size)
    return _record("add_scalar", out, (x,), lambda g: (g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = Dims(*shape).shape
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: {x.shape} has {x.data.size} elements, {shape} needs {np.prod(shape)}")
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute the four axes; ``axes`` is a permutation of ``(0, 1, 2, 3)``."""
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != [0, 1, 2, 3]:
        raise ShapeError(f"transpose: {axes} is not a permutation of the four axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("transpose", out, (x,), lambda g: (g.transpose(inverse),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match {tensors[0].shape} outside axis 1")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _record("concat_channels", out, tensors, lambda g: tuple(np.split(g, splits, axis=1)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over ``(n, c)``.

    ``a`` is ``(n, c, M, K)`` and ``b`` is ``(n, c, K, P)``; the result is
    ``(n, c, M, P)``.
    """
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    n, c, m, k = ad.shape
    _count("matmul", 2 * n * c * m * k * bd.shape[3])

    def grad(g):
        return (np.matmul(g, bd.swapaxes(2, 3)), np.matmul(ad.swapaxes(2, 3), g))

    return _record("matmul", out, (a, b), grad)


def sum_all(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.sum())
    _count("add", x.data.size)
    shape = x.shape
    return _record("sum_all", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    out = np.full((1, 1, 1, 1), x.data.mean())
    _count("add", size)
    shape = x.shape
    return _record("mean_all", out, (x,), lambda g: (np.broadcast_to(g / size, shape).copy(),))
