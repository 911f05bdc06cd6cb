"""Optimizer/training state and its binary encoding (used inside checkpoints)."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes

__all__ = ["TrainState", "decode_state", "encode_state", "read_record", "write_record"]


@dataclass
class TrainState:
    """Everything needed to resume a run besides the parameters.

    ``step`` counts generator updates. ``moments`` maps a parameter name to
    its Adam ``(m, v, t)``.
    """

    step: int = 0
    gamma: float = 1e-3
    learning_rate: float = 1e-3
    rng_seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    moments: dict = field(default_factory=dict)


def write_record(name: str, array) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + tensor_to_bytes(np.asarray(array, dtype=np.float64))


def read_record(buf: bytes, offset: int) -> tuple[str, np.ndarray, int]:
    if len(buf) < offset + 4:
        raise ValueError("truncated record")
    (n,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + n:
        raise ValueError("truncated record name")
    name = buf[offset : offset + n].decode("utf-8")
    t, offset = tensor_from_bytes(buf, offset + n)
    return name, t.data, offset


def encode_state(state: TrainState) -> bytes:
    opt = state.optimizer.encode("utf-8")
    out = [
        struct.pack("<QddQ", state.step, state.gamma, state.learning_rate, state.rng_seed),
        struct.pack("<I", len(opt)) + opt,
        struct.pack("<ddd", state.beta1, state.beta2, state.eps),
        struct.pack("<I", 3 * len(state.moments)),
    ]
    for name in sorted(state.moments):
        m, v, t = state.moments[name]
        out += [write_record(f"m:{name}", m), write_record(f"v:{name}", v), write_record(f"t:{name}", np.float64(t))]
    return b"".join(out)


def decode_state(buf: bytes, offset: int) -> tuple[TrainState, int]:
    try:
        step, gamma, lr, seed = struct.unpack_from("<QddQ", buf, offset)
        offset += 32
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        opt = buf[offset : offset + n].decode("utf-8")
        offset += n
        beta1, beta2, eps = struct.unpack_from("<ddd", buf, offset)
        offset += 24
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
    except struct.error as exc:
        raise ValueError("truncated train-state block") from exc
    parts: dict[str, dict] = {}
    for _ in range(count):
        name, arr, offset = read_record(buf, offset)
        kind, _, pname = name.partition(":")
        parts.setdefault(pname, {})[kind] = arr
    moments = {k: (d["m"], d["v"], int(d["t"])) for k, d in parts.items()}
    return TrainState(step, gamma, lr, seed, opt, beta1, beta2, eps, moments), offset
