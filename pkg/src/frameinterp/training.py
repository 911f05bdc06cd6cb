"""Losses, optimizers and the training loops.

The generator is trained either with a plain sum-of-squares loss or with
the decayed combination ``alpha * sum_sq + adversarial`` where
``alpha = exp(-gamma * n)`` and ``n`` counts generator updates. The
discriminator outputs the probability that a frame is *generated*.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import networks as N
from . import tensor as T
from .data import FrameTriplet, random_crop
from .state import TrainState
from .tensor import NonFiniteError, Tape, Tensor

__all__ = [
    "LossReport",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "TrainingDiverged",
    "alpha_schedule",
    "discriminator_loss",
    "generator_loss",
    "load_config",
    "load_training_checkpoint",
    "mse_loss",
    "parse_config",
    "predict",
    "sgd_adam_update",
    "train",
    "train_adversarial",
    "train_joint_implicit_flow",
    "train_mse",
]

log = logging.getLogger(__name__)

EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """The loss or an intermediate value became non-finite."""


# --- losses ------------------------------------------------------------------


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def mse_loss(a, b) -> Tensor:
    """Sum (not mean) of squared differences over every pixel and channel."""
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_loss: shape mismatch {a.shape} vs {b.shape}")
    return T.reduce_sum(T.square(T.sub(a, b)))


def alpha_schedule(gamma: float, n: int) -> float:
    """Weight of the squared-error term after ``n`` generator updates."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if n < 0:
        raise ValueError("n must be non-negative")
    return math.exp(-gamma * n)


@dataclass
class LossReport:
    total: float
    mse_term: float
    adversarial_term: float
    alpha: float
    loss: Optional[Tensor] = field(default=None, repr=False, compare=False)


def _check_prob(p: Tensor, what: str) -> None:
    if np.any(p.data < 0) or np.any(p.data > 1):
        raise ValueError(f"{what} must lie in [0, 1]")


def _neg_log(x: Tensor) -> Tensor:
    """Mean over elements of -log(x + EPS)."""
    shifted = T.add(x, Tensor(np.full(x.shape, EPS, dtype=x.data.dtype)))
    return T.scale(T.reduce_mean(T.log(shifted)), -1.0)


def _one_minus(p: Tensor) -> Tensor:
    return T.sub(Tensor(np.ones(p.shape, dtype=p.data.dtype)), p)


def generator_loss(gen_out, truth, disc_prob, alpha: float) -> LossReport:
    """``alpha * sum_sq(gen_out, truth) + mean(-log(1 - D(gen_out) + eps))``.

    For a batch, the squared-error term is the per-image sum averaged over
    the batch. ``disc_prob`` is D's probability that ``gen_out`` is
    generated; the generator lowers the loss by lowering it.
    """
    gen_out, truth, p = _tensor(gen_out), _tensor(truth), _tensor(disc_prob)
    _check_prob(p, "disc_prob")
    batch = gen_out.shape[0] if gen_out.ndim == 4 else 1
    sq = T.scale(mse_loss(gen_out, truth), 1.0 / batch)
    adv = _neg_log(_one_minus(p))
    total = T.add(T.scale(sq, alpha), adv)
    return LossReport(total.item(), sq.item(), adv.item(), alpha, total)


def discriminator_loss(prob_on_real, prob_on_generated) -> Tensor:
    """Binary cross-entropy with label 1 = generated: -log(1 - p_real) - log(p_gen)."""
    pr, pg = _tensor(prob_on_real), _tensor(prob_on_generated)
    _check_prob(pr, "prob_on_real")
    _check_prob(pg, "prob_on_generated")
    return T.add(_neg_log(_one_minus(pr)), _neg_log(pg))


# --- optimizer ---------------------------------------------------------------


def sgd_adam_update(store: N.ParamStore, state: TrainState, prefix: str = "", lr: Optional[float] = None) -> None:
    """One in-place update of every parameter in ``store`` from its ``grad``.

    ``state.optimizer`` selects ``adam`` or ``sgd``. Adam moments live in
    ``state.moments`` under ``prefix + name``.
    """
    lr = state.learning_rate if lr is None else lr
    missing = [name for name, t in store.items() if t.grad is None]
    if missing:
        raise ValueError(f"parameter {missing[0]!r} has no gradient")
    with np.errstate(over="ignore", invalid="ignore"):
        for name, t in store.items():
            _step_one(name, t, state, prefix, lr)


def _step_one(name: str, t: Tensor, state: TrainState, prefix: str, lr: float) -> None:
    g = t.grad
    if state.optimizer == "sgd":
        t.data = t.data - (lr * g).astype(t.data.dtype)
        return
    if state.optimizer != "adam":
        raise ValueError(f"unknown optimizer {state.optimizer!r}")
    key = prefix + name
    m, v, step = state.moments.get(key, (np.zeros_like(t.data), np.zeros_like(t.data), 0))
    step += 1
    m = state.beta1 * m + (1 - state.beta1) * g
    v = state.beta2 * v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    t.data = t.data - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(t.data.dtype)
    state.moments[key] = (m, v, step)


# --- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    """Flat key/value training configuration.

    ``mode`` is ``mse`` or ``adversarial``, optionally followed by
    ``+flow-external`` or ``+flow-implicit``.
    """

    mode: str = "mse"
    depth: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    extra_convs: int = 0
    lr: float = 1e-3
    disc_lr: float = 0.0
    gamma: float = 1e-3
    batch: int = 8
    steps: int = 1000
    seed: int = 0
    crop: int = 0
    image_size: int = 0
    dataset: str = ""
    flows: str = ""
    checkpoint: str = ""
    log: str = ""
    flow_mode: str = ""
    flow_channels: tuple[int, ...] = (16, 32, 64)
    flow_gain: float = 1.0
    disc_channels: tuple[int, ...] = (8, 16)
    disc_hidden: tuple[int, ...] = ()
    conditional_disc: bool = False
    optimizer: str = "adam"
    dtype: str = "float32"
    lr_schedule: str = "constant"

    @property
    def loss(self) -> str:
        return self.mode.split("+")[0]

    @property
    def prior(self) -> Optional[str]:
        if self.flow_mode:
            return self.flow_mode
        if "+flow-" in self.mode:
            return self.mode.split("+flow-")[1]
        return None

    def validate(self) -> None:
        if self.loss not in ("mse", "adversarial"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.prior not in (None, "external", "implicit"):
            raise ValueError(f"unknown flow mode {self.prior!r}")
        if self.depth != len(self.channels):
            raise ValueError(f"depth {self.depth} does not match channels {self.channels}")
        if self.steps < 0 or self.batch < 1 or self.lr < 0 or self.gamma <= 0:
            raise ValueError("steps, batch, lr and gamma must be valid")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def rate(self, base: float, n: int) -> float:
        """Learning rate at step ``n``: constant, or cosine-decayed to zero over ``steps``."""
        if self.lr_schedule == "constant" or self.steps == 0:
            return base
        return base * 0.5 * (1.0 + math.cos(math.pi * n / self.steps))

    def generator_config(self) -> N.GeneratorConfig:
        predictor = N.FlowPredictorConfig(channels=self.flow_channels, gain=self.flow_gain, seed=self.seed + 1)
        return N.GeneratorConfig(
            channels=self.channels, extra_convs=self.extra_convs, seed=self.seed, predictor=predictor
        )

    def discriminator_config(self, image_size: int) -> N.DiscriminatorConfig:
        return N.DiscriminatorConfig(
            image_size=image_size,
            in_channels=9 if self.conditional_disc else 3,
            channels=self.disc_channels,
            hidden=self.disc_hidden,
            seed=self.seed + 2,
        )


def _coerce(value: str, kind):
    if kind is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    if kind == tuple[int, ...]:
        value = value.strip().strip("()[]")
        return tuple(int(v) for v in value.replace("/", ",").split(",") if v.strip())
    return value.strip()


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); keyword overrides win."""
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    resolved = {"int": int, "float": float, "str": str, "bool": bool, "tuple[int, ...]": tuple[int, ...]}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(" ")
        key = key.strip().replace("-", "_")
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for key, value in values.items():
        kind = resolved.get(kinds[key], kinds[key]) if isinstance(kinds[key], str) else kinds[key]
        kwargs[key] = _coerce(value, kind) if isinstance(value, str) else value
    if "channels" in kwargs and "depth" not in kwargs:
        kwargs["depth"] = len(kwargs["channels"])
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), **overrides)


# --- training loops ----------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    generator: tuple
    discriminator: Optional[tuple]
    history: list[LossReport]
    config: TrainConfig
    disc_history: list[float] = field(default_factory=list)


def _batch(dataset: Sequence[FrameTriplet], idx, crop: int, rng, dtype, need_flow: bool):
    items = [dataset[i] for i in idx]
    if crop:
        items = [random_crop(t, crop, rng) for t in items]
    first = np.stack([t.first for t in items]).astype(dtype)
    middle = np.stack([t.middle_truth for t in items]).astype(dtype)
    second = np.stack([t.second for t in items]).astype(dtype)
    flow = None
    if need_flow:
        if any(t.flow_1_to_2 is None for t in items):
            raise ValueError("external flow mode needs a flow for every triplet")
        flow = np.stack([t.flow_1_to_2.to_array() for t in items]).astype(dtype)
    return first, middle, second, flow


def _generator_inputs(first, second, flow) -> dict:
    inputs = {"first": Tensor(first), "second": Tensor(second)}
    if flow is not None:
        inputs["flow"] = Tensor(flow)
    return inputs


def build_models(cfg: TrainConfig, image_size: int):
    gcfg = cfg.generator_config()
    if cfg.prior is None:
        gen = N.build_generator(gcfg)
    else:
        gen = N.build_generator_with_flow_prior(gcfg, cfg.prior)
    disc = N.build_discriminator(cfg.discriminator_config(image_size)) if cfg.loss == "adversarial" else None
    return gen, disc


def _disc_input(cfg: TrainConfig, candidate: Tensor, first, second) -> Tensor:
    if not cfg.conditional_disc:
        return candidate
    return T.concat([Tensor(first), candidate, Tensor(second)], axis=1)


def _write_log(handle, report: LossReport, n: int) -> None:
    if handle is not None:
        handle.write(f"{n}\t{report.alpha!r}\t{report.mse_term!r}\t{report.adversarial_term!r}\t{report.total!r}\n")


def _first_non_finite(store: N.ParamStore) -> Optional[str]:
    for name, t in store.items():
        if not np.all(np.isfinite(t.data)):
            return name
    return None


def train(
    dataset: Sequence[FrameTriplet],
    cfg: TrainConfig,
    on_gradients: Optional[Callable[[int, N.ParamStore], None]] = None,
) -> TrainResult:
    """Run the regime selected by ``cfg.mode``; deterministic for a fixed seed.

    ``on_gradients(n, store)`` sees the generator's gradients at step ``n``
    before they are applied.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("training needs at least one triplet")
    dtype = np.dtype(cfg.dtype)
    size = cfg.crop or cfg.image_size or dataset[0].first.shape[1]
    rng = np.random.default_rng(cfg.seed)
    with T.precision(dtype):
        (gspec, gstore), disc = build_models(cfg, size)
    state = TrainState(gamma=cfg.gamma, learning_rate=cfg.lr, rng_seed=cfg.seed, optimizer=cfg.optimizer)
    history: list[LossReport] = []
    disc_history: list[float] = []
    need_flow = cfg.prior == "external"
    adversarial = cfg.loss == "adversarial"
    low_disc_run = 0
    handle = open(cfg.log, "w") if cfg.log else None
    try:
        if handle is not None:
            handle.write("n\talpha\tmse_term\tadv_term\ttotal\n")
        for _ in range(cfg.steps):
            idx = rng.integers(0, len(dataset), size=cfg.batch)
            first, middle, second, flow = _batch(dataset, idx, cfg.crop, rng, dtype, need_flow)
            n = state.step
            try:
                with Tape() as tape:
                    fake = N.forward(gspec, gstore, **_generator_inputs(first, second, flow))
                if adversarial:
                    dspec, dstore = disc
                    dstore.zero_grad()
                    with Tape():
                        p_real = N.forward(dspec, dstore, image=_disc_input(cfg, Tensor(middle), first, second))
                        p_fake = N.forward(dspec, dstore, image=_disc_input(cfg, fake.detach(), first, second))
                        d_loss = discriminator_loss(p_real, p_fake)
                        T.backward(d_loss)
                    sgd_adam_update(dstore, state, prefix="discriminator/", lr=cfg.rate(cfg.disc_lr or cfg.lr, n))
                    disc_history.append(d_loss.item())
                    low_disc_run = low_disc_run + 1 if d_loss.item() < 1e-3 else 0
                    if low_disc_run == 100:
                        log.warning("discriminator loss below 1e-3 for 100 steps at n=%d (possible collapse)", n)
                    with tape:
                        p_gen = N.forward(dspec, dstore, image=_disc_input(cfg, fake, first, second))
                        report = generator_loss(fake, Tensor(middle), p_gen, alpha_schedule(cfg.gamma, n))
                else:
                    with tape:
                        sq = T.scale(mse_loss(fake, Tensor(middle)), 1.0 / cfg.batch)
                    report = LossReport(sq.item(), sq.item(), 0.0, 1.0, sq)
                if not math.isfinite(report.total):
                    raise NonFiniteError("loss is not finite")
                gstore.zero_grad()
                T.backward(report.loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"diverged at generator step {n}: {exc}") from exc
            if on_gradients is not None:
                on_gradients(n, gstore)
            sgd_adam_update(gstore, state, prefix="generator/", lr=cfg.rate(cfg.lr, n))
            bad = _first_non_finite(gstore) or (_first_non_finite(disc[1]) if adversarial else None)
            if bad:
                raise TrainingDiverged(f"diverged at generator step {n}: parameter {bad!r} is not finite")
            state.step += 1
            report.loss = None
            history.append(report)
            _write_log(handle, report, n)
    finally:
        if handle is not None:
            handle.close()
    result = TrainResult(state, (gspec, gstore), disc, history, cfg, disc_history)
    if cfg.checkpoint:
        save_training_checkpoint(result, cfg.checkpoint)
    return result


def train_mse(dataset: Sequence[FrameTriplet], cfg: TrainConfig, on_gradients=None) -> TrainResult:
    return train(dataset, dataclasses.replace(cfg, mode="mse"), on_gradients)


def train_adversarial(dataset: Sequence[FrameTriplet], cfg: TrainConfig, on_gradients=None) -> TrainResult:
    mode = "adversarial" + (f"+flow-{cfg.prior}" if cfg.prior else "")
    return train(dataset, dataclasses.replace(cfg, mode=mode), on_gradients)


def train_joint_implicit_flow(dataset: Sequence[FrameTriplet], cfg: TrainConfig, on_gradients=None) -> TrainResult:
    """Generator and embedded flow predictor trained as one network (no flow input)."""
    loss = cfg.loss if cfg.loss in ("mse", "adversarial") else "adversarial"
    return train(dataset, dataclasses.replace(cfg, mode=f"{loss}+flow-implicit", flow_mode=""), on_gradients)


def _combined_store(result: TrainResult) -> N.ParamStore:
    gen = result.generator[1]
    out = N.ParamStore().merged(generator=gen)
    if result.discriminator is not None:
        out = out.merged(discriminator=result.discriminator[1])
    return out


def save_training_checkpoint(result: TrainResult, path) -> None:
    N.checkpoint_save(_combined_store(result), path, result.state)


def load_training_checkpoint(path, cfg: TrainConfig, image_size: int) -> TrainResult:
    """Rebuild the models described by ``cfg`` and fill them from ``path``."""
    with T.precision(np.dtype(cfg.dtype)):
        gen, disc = build_models(cfg, image_size)
    shell = TrainResult(TrainState(), gen, disc, [], cfg)
    state = N.checkpoint_load(path, _combined_store(shell))
    shell.state = state or TrainState()
    return shell


def predict(generator: tuple, first: np.ndarray, second: np.ndarray, flow: Optional[np.ndarray] = None, batch: int = 16):
    """Middle frames for CHW or NCHW inputs (no tape)."""
    spec, store = generator
    single = first.ndim == 3
    f4 = first[None] if single else first
    s4 = second[None] if single else second
    fl = None if flow is None else (flow[None] if single else flow)
    dtype = store[store.names()[0]].data.dtype
    outs = []
    for i in range(0, f4.shape[0], batch):
        fl_i = None if fl is None else fl[i : i + batch].astype(dtype)
        out = N.forward(spec, store, **_generator_inputs(f4[i : i + batch].astype(dtype), s4[i : i + batch].astype(dtype), fl_i))
        outs.append(out.data.astype(np.float64))
    res = np.concatenate(outs)
    return res[0] if single else res
