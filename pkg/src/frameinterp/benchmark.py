"""Desk-scale comparison of the interpolation methods on synthetic scenes.

Trains the plain squared-error generator, the adversarial generator, a
flow-prior generator fed noisy flow, and the jointly trained implicit-flow
generator, then reports them next to the frame-average and noisy-warp
baselines. All runs derive from one seed.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import networks as N
from .data import FrameTriplet, make_synthetic_set
from .flow import FlowField, average_frames, warp_middle
from .metrics import EvalReport, evaluate, format_report
from .training import TrainConfig, TrainResult, predict, train

__all__ = [
    "DeskProtocol",
    "ProtocolResult",
    "add_flow_noise",
    "flow_cosine",
    "pooled_flow_cosine",
    "gradient_energy",
    "run_protocol",
]

log = logging.getLogger(__name__)


@dataclass
class DeskProtocol:
    """Fixed budget for the comparison. Defaults are the documented run."""

    count: int = 500
    size: int = 64
    max_speed: float = 6.0
    eval_count: int = 100
    flow_noise: float = 1.0
    seed: int = 0
    crop: int = 32
    # the external-flow model sees larger crops, so occlusion bands keep their context
    external_crop: int = 48
    batch: int = 8
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    # alpha decay per model: the flow models keep the squared-error term longer
    gamma: float = 1e-3
    external_gamma: float = 5e-5
    implicit_gamma: float = 2e-4
    mse_steps: int = 2000
    adversarial_steps: int = 2000
    external_steps: int = 6000
    implicit_steps: int = 6000
    flow_gain: float = 4.0
    flow_channels: tuple[int, ...] = (16, 32, 64, 128)
    models: tuple[str, ...] = ("mse", "adversarial", "external", "implicit")


@dataclass
class ProtocolResult:
    reports: dict[str, EvalReport]
    gradient_energy: dict[str, float]
    implicit_flow_cosine: Optional[float]
    seconds: dict[str, float]
    # mean of per-pixel cosines, reported next to the pooled value
    implicit_flow_cosine_per_pixel: Optional[float] = None
    results: dict[str, TrainResult] = field(default_factory=dict, repr=False)

    def table(self) -> str:
        return format_report(self.reports)


def add_flow_noise(flow: FlowField, sigma: float, rng: np.random.Generator) -> FlowField:
    """Ground-truth flow plus independent N(0, sigma^2) pixels per component."""
    return FlowField(
        flow.dx + rng.normal(0.0, sigma, flow.dx.shape), flow.dy + rng.normal(0.0, sigma, flow.dy.shape)
    )


def gradient_energy(images) -> float:
    """Mean squared horizontal plus vertical finite difference, averaged over images."""
    total = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        gx = np.diff(img, axis=-1)
        gy = np.diff(img, axis=-2)
        total.append(np.mean(gx**2) + np.mean(gy**2))
    return float(np.mean(total))


def flow_cosine(predicted: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Mean per-pixel cosine similarity between [2, H, W] flows over ``mask``."""
    dot = np.sum(predicted * truth, axis=0)
    norm = np.linalg.norm(predicted, axis=0) * np.linalg.norm(truth, axis=0)
    cos = np.where(norm > 0, dot / np.maximum(norm, 1e-12), 0.0)
    return float(np.mean(cos[mask]))


def pooled_flow_cosine(predicted, truth, masks) -> float:
    """Cosine between the masked flow vectors of all images, taken as one long vector."""
    p = np.concatenate([np.asarray(f)[:, m].ravel() for f, m in zip(predicted, masks)])
    t = np.concatenate([np.asarray(f)[:, m].ravel() for f, m in zip(truth, masks)])
    norm = np.linalg.norm(p) * np.linalg.norm(t)
    return float(p @ t / norm) if norm > 0 else 0.0


def _config(p: DeskProtocol, mode: str, steps: int, gamma: float, crop: int) -> TrainConfig:
    return TrainConfig(
        mode=mode,
        steps=steps,
        batch=p.batch,
        crop=crop,
        lr=p.lr,
        gamma=gamma,
        seed=p.seed,
        flow_gain=p.flow_gain,
        flow_channels=tuple(p.flow_channels),
        lr_schedule=p.lr_schedule,
    )


def _stack(triplets: list[FrameTriplet], attr: str) -> np.ndarray:
    return np.stack([getattr(t, attr) for t in triplets])


def run_protocol(p: DeskProtocol = DeskProtocol(), progress: Callable[[str], None] = log.info) -> ProtocolResult:
    data = make_synthetic_set(p.count, p.size, p.max_speed, seed=p.seed)
    noise_rng = np.random.default_rng(p.seed + 1)
    noisy = [
        FrameTriplet(t.first, t.middle_truth, t.second, add_flow_noise(t.flow_1_to_2, p.flow_noise, noise_rng))
        for t in data.triplets
    ]
    n_train = p.count - p.eval_count
    train_exact, eval_exact = data.triplets[:n_train], data.triplets[n_train:]
    train_noisy, eval_noisy = noisy[:n_train], noisy[n_train:]
    truths = [t.middle_truth for t in eval_exact]
    first, second = _stack(eval_exact, "first"), _stack(eval_exact, "second")

    reports = {
        "average": evaluate([average_frames(t.first, t.second) for t in eval_exact], truths),
        "warp_noisy_flow": evaluate([warp_middle(t.first, t.second, t.flow_1_to_2) for t in eval_noisy], truths),
    }
    energy = {"truth": gradient_energy(truths)}
    seconds: dict[str, float] = {}
    results: dict[str, TrainResult] = {}
    cosine = per_pixel = None

    plan = {
        "mse": ("mse", p.mse_steps, train_exact, p.gamma),
        "adversarial": ("adversarial", p.adversarial_steps, train_exact, p.gamma),
        "external": ("adversarial+flow-external", p.external_steps, train_noisy, p.external_gamma),
        "implicit": ("adversarial+flow-implicit", p.implicit_steps, train_exact, p.implicit_gamma),
    }
    for name in p.models:
        mode, steps, dataset, gamma = plan[name]
        progress(f"training {name} ({mode}, {steps} steps)")
        start = time.perf_counter()
        result = train(dataset, _config(p, mode, steps, gamma, p.external_crop if name == "external" else p.crop))
        seconds[name] = time.perf_counter() - start
        results[name] = result
        flow = _stack_flows(eval_noisy) if name == "external" else None
        preds = predict(result.generator, first, second, flow)
        reports[f"nn_{name}"] = evaluate(list(preds), truths)
        energy[f"nn_{name}"] = gradient_energy(preds)
        if name == "implicit":
            cosine, per_pixel = _implicit_cosine(result, first, second, data.middle_flows[n_train:])
        progress(f"{name}: mse={reports[f'nn_{name}'].mse:.6f} in {seconds[name]:.0f}s")
    return ProtocolResult(reports, energy, cosine, seconds, per_pixel, results)


def _stack_flows(triplets: list[FrameTriplet]) -> np.ndarray:
    return np.stack([t.flow_1_to_2.to_array() for t in triplets])


def _implicit_cosine(result: TrainResult, first, second, middle_flows: list[FlowField]) -> tuple[float, float]:
    spec, store = result.generator
    dtype = store[store.names()[0]].data.dtype
    values = N.run(spec, store, {"first": first.astype(dtype), "second": second.astype(dtype)})
    predicted = values[spec.extra_outputs["flow"]].data.astype(np.float64)
    truths = [f.to_array() for f in middle_flows]
    # foreground: pixels where something moves
    masks = [np.any(t != 0, axis=0) for t in truths]
    sims = [flow_cosine(p, t, m) for p, t, m in zip(predicted, truths, masks) if m.any()]
    return pooled_flow_cosine(predicted, truths, masks), float(np.mean(sims))


def protocol_from_dict(values: dict) -> DeskProtocol:
    known = {f.name for f in dataclasses.fields(DeskProtocol)}
    return DeskProtocol(**{k: v for k, v in values.items() if k in known})
