"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active, and whose inputs are tracked, are recorded in
execution order together with a backward rule; :func:`backward` replays
the record in reverse and accumulates gradients into the leaf tensors.

There is deliberately no broadcasting: binary operations require equal
shapes and every reshaping step is an explicit op.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "default_dtype",
    "elementwise",
    "exp",
    "finite_checks",
    "leaky_relu",
    "log",
    "mul",
    "precision",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "set_default_dtype",
    "sigmoid",
    "slice_channels",
    "square",
    "sub",
    "tanh",
    "tensor_from_bytes",
    "tensor_new",
    "tensor_to_bytes",
]

_DTYPE = np.dtype(np.float64)
_CHECK_FINITE = True
_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Enable or disable the NaN/Inf check performed after every op."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


class Tensor:
    """N-dimensional real array with an optional gradient buffer.

    ``requires_grad=True`` marks a leaf whose gradient is accumulated by
    :func:`backward`. Tensors produced by recorded ops carry a ``node_id``
    into the tape that created them.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("inputs", "output_id", "backward")

    def __init__(self, inputs, output_id, backward):
        self.inputs = inputs
        self.output_id = output_id
        self.backward = backward


class Tape:
    """Ordered record of the ops executed inside a ``with Tape():`` block."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, rule: Callable) -> None:
        output.node_id = len(self.nodes)
        output.tape = self
        self.nodes.append(_Node(tuple(inputs), output.node_id, rule))

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.tracked:
                    continue
                if t.node_id is not None and t.tape is self:
                    prev = grads.get(t.node_id)
                    grads[t.node_id] = gi if prev is None else prev + gi
                elif t.requires_grad:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def make_result(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it when needed.

    ``rule(grad_out)`` must return one gradient (or None) per input.
    """
    out = Tensor(_check(data, op), dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(inputs, out, rule)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is None or loss.node_id is None:
        raise ValueError("loss is not on an active tape")
    loss.tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor_new(shape: Sequence[int], fill=0.0, requires_grad: bool = False) -> Tensor:
    """Create a tensor of ``shape`` from a scalar fill or a flat value list."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive: {shape}")
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=_DTYPE)
    else:
        values = np.asarray(fill, dtype=_DTYPE).reshape(-1)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{values.size} values do not fill shape {shape}")
        data = values.reshape(shape)
    return Tensor(data, requires_grad=requires_grad)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return make_result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to keep exp() from overflowing
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return make_result(y, (a,), lambda g: (g / x,), "log")


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


_UNARY = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "square": square,
    "log": log,
    "leaky_relu": leaky_relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``scale`` takes a scalar ``b``; ``add``/``sub``/``mul`` take a tensor of
    the same shape; the remaining ops are unary.
    """
    if op == "scale":
        return scale(a, b)
    if op in _BINARY:
        return _BINARY[op](a, _as_tensor(b))
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    return make_result(
        np.asarray(a.data.sum(), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=dtype),),
        "reduce_sum",
    )


def reduce_mean(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    arrays = [t.data for t in tensors]
    ref = list(arrays[0].shape)
    for arr in arrays[1:]:
        other = list(arr.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ValueError(f"concat: incompatible shapes {arrays[0].shape} and {arr.shape}")
    splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate(arrays, axis=axis), tuple(tensors), rule, "concat")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of a CHW or NCHW tensor."""
    axis = a.ndim - 3
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = a.shape, a.data.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(a.data[index].copy(), (a,), rule, "slice_channels")


_MAGIC = b"FITN"


def tensor_to_bytes(t) -> bytes:
    """Little-endian: magic, u32 rank, u32 extents, f64 row-major payload."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    head = _MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``offset``; returns it and the next offset."""
    if buf[offset : offset + 4] != _MAGIC:
        raise ValueError("bad tensor magic")
    offset += 4
    if len(buf) < offset + 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + 4 * rank:
        raise ValueError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = offset + 8 * count
    if len(buf) < end:
        raise ValueError("truncated tensor payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape)
    return Tensor(data.astype(np.float64), dtype=np.float64), end
