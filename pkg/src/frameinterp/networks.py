"""Declarative layer graphs for the generator, discriminator and flow predictor.

A :class:`NetworkSpec` is an ordered list of :class:`Layer` descriptors, each
naming its input nodes. Layers that name the same ``params`` prefix share one
set of weights in the :class:`ParamStore`; that is how the two encoder
branches of the generator are tied together.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .state import TrainState, decode_state, encode_state, read_record, write_record
from .tensor import Tensor

__all__ = [
    "DiscriminatorConfig",
    "FlowPredictorConfig",
    "GeneratorConfig",
    "Layer",
    "NetworkSpec",
    "ParamStore",
    "build_discriminator",
    "build_flow_predictor",
    "build_generator",
    "build_generator_with_flow_prior",
    "checkpoint_load",
    "checkpoint_save",
    "discriminator_param_count",
    "forward",
    "generator_param_count",
    "run",
]

PARAM_KINDS = {"conv", "tconv", "dcl", "dense"}


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    inputs: tuple[str, ...]
    params: Optional[str] = None
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    factor: float = 1.0

    def geometry(self) -> tuple:
        return (self.kind, self.in_ch, self.out_ch, self.kernel, self.stride)


@dataclass
class NetworkSpec:
    inputs: tuple[str, ...]
    layers: list[Layer]
    output: str
    skips: list[tuple[str, str]] = field(default_factory=list)
    extra_outputs: dict[str, str] = field(default_factory=dict)

    def sharing_groups(self) -> dict[str, list[str]]:
        """Parameter prefix -> names of the layers that use it."""
        groups: dict[str, list[str]] = {}
        for layer in self.layers:
            if layer.params is not None:
                groups.setdefault(layer.params, []).append(layer.name)
        return groups

    @property
    def depth(self) -> int:
        """Number of layers, not counting pure shape adapters."""
        return sum(layer.kind not in ("flatten",) for layer in self.layers)

    def validate(self) -> None:
        known = set(self.inputs)
        by_params: dict[str, Layer] = {}
        for layer in self.layers:
            for name in layer.inputs:
                if name not in known:
                    raise ValueError(f"layer {layer.name!r} reads unknown node {name!r}")
            if layer.name in known:
                raise ValueError(f"duplicate node name {layer.name!r}")
            known.add(layer.name)
            if layer.params is not None:
                first = by_params.setdefault(layer.params, layer)
                if first.geometry() != layer.geometry():
                    raise ValueError(f"shared parameters {layer.params!r} used with different geometry")
        if self.output not in known:
            raise ValueError(f"output node {self.output!r} is never produced")


class ParamStore:
    """Ordered name -> Tensor map of learnable parameters."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(data, dtype=T.default_dtype()), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = [k for k in self._params if k not in arrays]
        if missing:
            raise KeyError(f"missing parameter {missing[0]!r}")
        extra = [k for k in arrays if k not in self._params]
        if extra:
            raise KeyError(f"unexpected parameter {extra[0]!r}")
        for k, t in self._params.items():
            arr = np.asarray(arrays[k])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k!r} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def merged(self, **prefixed: "ParamStore") -> "ParamStore":
        """A new store viewing ``self`` plus other stores under name prefixes."""
        out = ParamStore()
        out._params.update(self._params)
        for prefix, store in prefixed.items():
            for k, t in store.items():
                out._params[f"{prefix}/{k}"] = t
        return out


# --- forward interpreter -----------------------------------------------------


def _conv_params(store: ParamStore, layer: Layer, padding: int) -> L.ConvParams:
    return L.ConvParams(store[f"{layer.params}.weight"], store[f"{layer.params}.bias"], layer.stride, padding)


def _apply(layer: Layer, args: list[Tensor], store: ParamStore) -> Tensor:
    kind = layer.kind
    if kind == "conv":
        return L.conv2d(args[0], _conv_params(store, layer, layer.kernel // 2))
    if kind == "dcl":
        return L.dcl(args[0], L.DclParams(_conv_params(store, layer, layer.kernel // 2)), args[1])
    if kind == "tconv":
        p = _conv_params(store, layer, layer.kernel // 2)
        extra = (0, 0)
        if len(args) > 1:
            extra = tuple(
                args[1].shape[ax] - ((args[0].shape[ax] - 1) * layer.stride - 2 * p.padding + layer.kernel)
                for ax in (-2, -1)
            )
        return L.conv_transpose2d(args[0], p, output_padding=extra)
    if kind == "dense":
        return L.dense(args[0], store[f"{layer.params}.weight"], store[f"{layer.params}.bias"])
    if kind == "relu":
        return T.relu(args[0])
    if kind == "leaky_relu":
        return T.leaky_relu(args[0], layer.factor)
    if kind == "sigmoid":
        return T.sigmoid(args[0])
    if kind == "tanh":
        return T.tanh(args[0])
    if kind == "add":
        return T.add(args[0], args[1])
    if kind == "scale":
        return T.scale(args[0], layer.factor)
    if kind == "concat":
        return T.concat(args, axis=args[0].ndim - 3)
    if kind == "maxpool":
        return L.maxpool2d(args[0], layer.kernel or 2)
    if kind == "flatten":
        x = args[0]
        return T.reshape(x, (-1,) if x.ndim == 3 else (x.shape[0], -1))
    raise ValueError(f"unknown layer kind {kind!r}")


def run(spec: NetworkSpec, store: ParamStore, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Evaluate every node; returns the full name -> value map."""
    missing = [n for n in spec.inputs if n not in inputs]
    if missing:
        raise ValueError(f"missing network input {missing[0]!r}")
    values = {n: (v if isinstance(v, Tensor) else Tensor(v)) for n, v in inputs.items()}
    for layer in spec.layers:
        values[layer.name] = _apply(layer, [values[n] for n in layer.inputs], store)
    return values


def forward(spec: NetworkSpec, store: ParamStore, **inputs) -> Tensor:
    return run(spec, store, inputs)[spec.output]


# --- builders ----------------------------------------------------------------


def _he(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)


def _init_params(spec: NetworkSpec, seed: int, overrides: Optional[dict[str, float]] = None) -> ParamStore:
    """He-normal weights, zero biases; ``overrides`` rescales named prefixes."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    overrides = overrides or {}
    for layer in spec.layers:
        if layer.params is None or f"{layer.params}.weight" in store:
            continue
        gain = overrides.get(layer.params, 1.0)
        if layer.kind in ("conv", "dcl"):
            shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
            fan_in = layer.in_ch * layer.kernel**2
            bias = layer.out_ch
        elif layer.kind == "tconv":
            # stored as the adjoint convolution [out=in_ch of the tconv, in=out_ch, k, k]
            shape = (layer.in_ch, layer.out_ch, layer.kernel, layer.kernel)
            fan_in = layer.in_ch * layer.kernel**2 // max(1, layer.stride**2)
            bias = layer.out_ch
        elif layer.kind == "dense":
            shape = (layer.out_ch, layer.in_ch)
            fan_in = layer.in_ch
            bias = layer.out_ch
        else:
            raise ValueError(f"layer kind {layer.kind!r} has no parameters")
        store.add(f"{layer.params}.weight", _he(rng, shape, fan_in, gain))
        store.add(f"{layer.params}.bias", np.zeros(bias))
    return store


def _check_channels(channels: tuple[int, ...], kernel: int, what: str) -> None:
    if len(channels) < 2:
        raise ValueError(f"{what}: depth must be at least 2")
    if any(b <= a for a, b in zip(channels, channels[1:])):
        raise ValueError(f"{what}: encoder channels must be strictly increasing")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"{what}: kernel must be a positive odd integer")


@dataclass(frozen=True)
class FlowPredictorConfig:
    """Encoder-decoder mapping a channel-stacked frame pair to (dx, dy).

    ``gain`` scales the linear output so unit activations mean ``gain`` pixels.
    """

    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    in_channels: int = 6
    gain: float = 1.0
    out_init: float = 0.1
    seed: int = 1


@dataclass(frozen=True)
class GeneratorConfig:
    """Y-network: shared encoder per input frame, sum merge, mirrored decoder.

    Level 0 is a stride-1 layer at full resolution (the one replaced by the
    displacement layer); every later level halves the resolution.
    ``extra_convs`` adds stride-1 conv+relu blocks per encoder level.
    """

    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    in_channels: int = 3
    out_channels: int = 3
    extra_convs: int = 0
    out_init: float = 0.1
    seed: int = 0
    predictor: FlowPredictorConfig = FlowPredictorConfig()


def _encoder_decoder(
    layers: list[Layer],
    skips: list,
    prefix: str,
    source: str,
    channels: tuple[int, ...],
    kernel: int,
    in_channels: int,
    out_channels: int,
    out_kind: Optional[str],
) -> str:
    """Single-input U-shaped stack used by the flow predictor."""
    prev, prev_ch = source, in_channels
    feats = []
    for lvl, ch in enumerate(channels):
        stride = 1 if lvl == 0 else 2
        layers.append(Layer(f"{prefix}e{lvl}", "conv", (prev,), f"{prefix}enc{lvl}", prev_ch, ch, kernel, stride))
        layers.append(Layer(f"{prefix}e{lvl}r", "relu", (f"{prefix}e{lvl}",)))
        prev, prev_ch = f"{prefix}e{lvl}r", ch
        feats.append(prev)
    for lvl in range(len(channels) - 2, -1, -1):
        ch = channels[lvl]
        up = f"{prefix}u{lvl}"
        layers.append(Layer(up, "tconv", (prev, feats[lvl]), f"{prefix}dec{lvl}", prev_ch, ch, kernel, 2))
        layers.append(Layer(f"{up}s", "add", (up, feats[lvl])))
        layers.append(Layer(f"{up}r", "relu", (f"{up}s",)))
        skips.append((feats[lvl], f"{up}s"))
        prev, prev_ch = f"{up}r", ch
    layers.append(Layer(f"{prefix}out", "conv", (prev,), f"{prefix}out", prev_ch, out_channels, kernel, 1))
    if out_kind is None:
        return f"{prefix}out"
    layers.append(Layer(f"{prefix}outa", out_kind, (f"{prefix}out",)))
    return f"{prefix}outa"


def _predictor_layers(cfg: FlowPredictorConfig, layers: list, skips: list, source: str, prefix: str) -> str:
    _check_channels(cfg.channels, cfg.kernel, "flow predictor")
    out = _encoder_decoder(layers, skips, prefix, source, cfg.channels, cfg.kernel, cfg.in_channels, 2, None)
    if cfg.gain != 1.0:
        layers.append(Layer(f"{prefix}flow", "scale", (out,), factor=cfg.gain))
        return f"{prefix}flow"
    return out


def _generator_spec(cfg: GeneratorConfig, mode: Optional[str]) -> NetworkSpec:
    _check_channels(cfg.channels, cfg.kernel, "generator")
    if cfg.extra_convs < 0:
        raise ValueError("extra_convs must be non-negative")
    k = cfg.kernel
    layers: list[Layer] = []
    skips: list[tuple[str, str]] = []
    extra_outputs: dict[str, str] = {}
    inputs: tuple[str, ...] = ("first", "second")
    flow_node = None
    if mode == "external":
        inputs = ("first", "second", "flow")
        flow_node = "flow"
    elif mode == "implicit":
        layers.append(Layer("pair", "concat", ("first", "second")))
        flow_node = _predictor_layers(cfg.predictor, layers, skips, "pair", "p_")
        extra_outputs["flow"] = flow_node
    elif mode is not None:
        raise ValueError(f"unknown flow-prior mode {mode!r}")
    if flow_node is not None:
        # first frame is sampled at p - F/2, second at p + F/2
        layers.append(Layer("flow_a", "scale", (flow_node,), factor=-0.5))
        layers.append(Layer("flow_b", "scale", (flow_node,), factor=0.5))

    feats: dict[str, list[str]] = {}
    for branch, source in (("a", "first"), ("b", "second")):
        prev, prev_ch = source, cfg.in_channels
        feats[branch] = []
        for lvl, ch in enumerate(cfg.channels):
            name = f"{branch}{lvl}"
            if lvl == 0 and flow_node is not None:
                layers.append(Layer(name, "dcl", (prev, f"flow_{branch}"), "enc0", prev_ch, ch, k, 1))
            else:
                layers.append(Layer(name, "conv", (prev,), f"enc{lvl}", prev_ch, ch, k, 1 if lvl == 0 else 2))
            layers.append(Layer(f"{name}r", "relu", (name,)))
            prev, prev_ch = f"{name}r", ch
            for m in range(cfg.extra_convs):
                xname = f"{name}x{m}"
                layers.append(Layer(xname, "conv", (prev,), f"enc{lvl}x{m}", ch, ch, k, 1))
                layers.append(Layer(f"{xname}r", "relu", (xname,)))
                prev = f"{xname}r"
            feats[branch].append(prev)

    top = len(cfg.channels) - 1
    layers.append(Layer("merge", "add", (feats["a"][top], feats["b"][top])))
    prev, prev_ch = "merge", cfg.channels[top]
    for lvl in range(top - 1, -1, -1):
        skip = f"skip{lvl}"
        layers.append(Layer(skip, "add", (feats["a"][lvl], feats["b"][lvl])))
        up = f"up{lvl}"
        ch = cfg.channels[lvl]
        layers.append(Layer(up, "tconv", (prev, skip), f"dec{lvl}", prev_ch, ch, k, 2))
        layers.append(Layer(f"{up}s", "add", (up, skip)))
        layers.append(Layer(f"{up}r", "relu", (f"{up}s",)))
        skips.append((skip, f"{up}s"))
        prev, prev_ch = f"{up}r", ch
    layers.append(Layer("out", "conv", (prev,), "out", prev_ch, cfg.out_channels, k, 1))
    layers.append(Layer("image", "sigmoid", ("out",)))
    spec = NetworkSpec(inputs, layers, "image", skips, extra_outputs)
    spec.validate()
    return spec


def _overrides(cfg: GeneratorConfig) -> dict[str, float]:
    return {"out": cfg.out_init, "p_out": cfg.predictor.out_init}


def build_generator(cfg: GeneratorConfig = GeneratorConfig()) -> tuple[NetworkSpec, ParamStore]:
    """Y-network without flow prior; inputs ``first`` and ``second``."""
    spec = _generator_spec(cfg, None)
    return spec, _init_params(spec, cfg.seed, _overrides(cfg))


def build_generator_with_flow_prior(
    cfg: GeneratorConfig = GeneratorConfig(), mode: str = "external"
) -> tuple[NetworkSpec, ParamStore]:
    """Y-network whose first layer is a displacement convolution.

    ``external``: extra input ``flow`` ([2, H, W], first -> second).
    ``implicit``: the flow comes from an embedded predictor (params ``p_*``)
    fed with both frames; it is also exposed as the extra output ``flow``.

    Parameters common with :func:`build_generator` get identical initial
    values for the same seed.
    """
    spec = _generator_spec(cfg, mode)
    base = _init_params(_generator_spec(cfg, None), cfg.seed, _overrides(cfg))
    store = ParamStore()
    extra = _init_params(spec, cfg.seed + 7919, _overrides(cfg))
    for name in extra:
        store.add(name, base[name].data if name in base else extra[name].data)
    return spec, store


def generator_param_count(cfg: GeneratorConfig, mode: Optional[str] = None) -> int:
    """Closed-form parameter count (one encoder branch only: the other is shared).

    encoder level l: c_{l-1} * c_l * k^2 + c_l   (c_{-1} = input channels)
    extra convs:     extra * (c_l^2 * k^2 + c_l) per level
    decoder level l: c_{l+1} * c_l * k^2 + c_l   for l < top
    output:          c_0 * out * k^2 + out
    plus the embedded predictor in implicit mode.
    """
    c, k2 = cfg.channels, cfg.kernel**2
    total = 0
    prev = cfg.in_channels
    for ch in c:
        total += prev * ch * k2 + ch + cfg.extra_convs * (ch * ch * k2 + ch)
        prev = ch
    for lvl in range(len(c) - 1):
        total += c[lvl + 1] * c[lvl] * k2 + c[lvl]
    total += c[0] * cfg.out_channels * k2 + cfg.out_channels
    if mode == "implicit":
        total += _unet_count(cfg.predictor.channels, cfg.predictor.kernel, cfg.predictor.in_channels, 2)
    return total


def _unet_count(channels, kernel, in_ch, out_ch) -> int:
    k2 = kernel**2
    total, prev = 0, in_ch
    for ch in channels:
        total += prev * ch * k2 + ch
        prev = ch
    for lvl in range(len(channels) - 1):
        total += channels[lvl + 1] * channels[lvl] * k2 + channels[lvl]
    return total + channels[0] * out_ch * k2 + out_ch


def build_flow_predictor(cfg: FlowPredictorConfig = FlowPredictorConfig()) -> tuple[NetworkSpec, ParamStore]:
    """Standalone predictor: inputs ``first``, ``second``; output ``[2, H, W]`` flow."""
    layers: list[Layer] = [Layer("pair", "concat", ("first", "second"))]
    skips: list = []
    out = _predictor_layers(cfg, layers, skips, "pair", "p_")
    spec = NetworkSpec(("first", "second"), layers, out, skips)
    spec.validate()
    return spec, _init_params(spec, cfg.seed, {"p_out": cfg.out_init})


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Stacks of conv / leaky-relu / 2x2 max-pool, then dense layers and a sigmoid.

    Layer count is ``3 * len(channels) + 2 * len(hidden) + 2``: the default
    has 8 layers, :meth:`full` has 16.
    """

    image_size: int = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16)
    hidden: tuple[int, ...] = ()
    kernel: int = 3
    slope: float = 0.2
    seed: int = 2

    @classmethod
    def full(cls, image_size: int = 64, in_channels: int = 3, seed: int = 2) -> "DiscriminatorConfig":
        return cls(image_size, in_channels, (16, 32, 64, 128), (64,), 3, 0.2, seed)


def discriminator_param_count(cfg: DiscriminatorConfig) -> int:
    k2 = cfg.kernel**2
    total, prev, size = 0, cfg.in_channels, cfg.image_size
    for ch in cfg.channels:
        total += prev * ch * k2 + ch
        prev, size = ch, size // 2
    width = prev * size * size
    for h in cfg.hidden:
        total += width * h + h
        width = h
    return total + width + 1


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> tuple[NetworkSpec, ParamStore]:
    """Probability that the input frame is generated; input node ``image``."""
    if not cfg.channels:
        raise ValueError("discriminator needs at least one conv stage")
    if cfg.kernel < 1 or cfg.kernel % 2 == 0:
        raise ValueError("discriminator kernel must be a positive odd integer")
    size = cfg.image_size
    if size >> len(cfg.channels) < 1:
        raise ValueError(f"image size {size} too small for {len(cfg.channels)} pooling stages")
    layers: list[Layer] = []
    prev, prev_ch = "image", cfg.in_channels
    for n, ch in enumerate(cfg.channels):
        layers.append(Layer(f"c{n}", "conv", (prev,), f"conv{n}", prev_ch, ch, cfg.kernel, 1))
        layers.append(Layer(f"c{n}a", "leaky_relu", (f"c{n}",), factor=cfg.slope))
        layers.append(Layer(f"c{n}p", "maxpool", (f"c{n}a",), kernel=2))
        prev, prev_ch = f"c{n}p", ch
        size //= 2
    layers.append(Layer("flat", "flatten", (prev,)))
    prev, width = "flat", prev_ch * size * size
    for n, h in enumerate(cfg.hidden):
        layers.append(Layer(f"d{n}", "dense", (prev,), f"dense{n}", width, h))
        layers.append(Layer(f"d{n}a", "leaky_relu", (f"d{n}",), factor=cfg.slope))
        prev, width = f"d{n}a", h
    layers.append(Layer("logit", "dense", (prev,), "logit", width, 1))
    layers.append(Layer("prob", "sigmoid", ("logit",)))
    spec = NetworkSpec(("image",), layers, "prob")
    spec.validate()
    return spec, _init_params(spec, cfg.seed)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"FICK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(store: ParamStore, state: Optional[TrainState] = None) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    out.append(struct.pack("<I", 0 if state is None else 1))
    if state is not None:
        out.append(encode_state(state))
    out.append(struct.pack("<I", len(store)))
    out += [write_record(name, t.data) for name, t in store.items()]
    return b"".join(out)


def checkpoint_save(store: ParamStore, path, state: Optional[TrainState] = None) -> None:
    """Write parameters (and optional train state) to ``path``."""
    Path(path).write_bytes(checkpoint_bytes(store, state))


def checkpoint_parse(buf: bytes) -> tuple[dict[str, np.ndarray], Optional[TrainState]]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    if len(buf) < 12:
        raise ValueError("truncated checkpoint header")
    version, has_state = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    offset = 12
    state = None
    if has_state:
        state, offset = decode_state(buf, offset)
    if len(buf) < offset + 4:
        raise ValueError("truncated checkpoint")
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    arrays = {}
    for _ in range(count):
        name, arr, offset = read_record(buf, offset)
        arrays[name] = arr
    return arrays, state


def checkpoint_load(path, store: ParamStore) -> Optional[TrainState]:
    """Fill ``store`` from ``path``; the name sets must match exactly."""
    arrays, state = checkpoint_parse(Path(path).read_bytes())
    store.load_arrays(arrays)
    return state
