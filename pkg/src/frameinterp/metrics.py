"""Image-quality metrics: mean squared error, PSNR and SSIM.

Images are CHW (or HW) arrays in [0, 1]. Colour images are converted to
luma before SSIM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

__all__ = [
    "EvalReport",
    "LUMA",
    "evaluate",
    "format_report",
    "gaussian_window",
    "mse_metric",
    "psnr",
    "ssim",
    "to_luma",
]

LUMA = (0.299, 0.587, 0.114)
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIZE = 11
SSIM_SIGMA = 1.5


def mse_metric(a: np.ndarray, b: np.ndarray) -> float:
    """Mean (not sum) of squared differences over every element."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(mse: float) -> float:
    """Peak signal-to-noise ratio in dB for unit peak; ``inf`` when mse is 0."""
    if mse < 0:
        raise ValueError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def to_luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    if image.ndim == 3 and image.shape[0] == 3:
        return LUMA[0] * image[0] + LUMA[1] * image[1] + LUMA[2] * image[2]
    raise ValueError(f"expected HW, 1xHxW or 3xHxW image, got {image.shape}")


def gaussian_window(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable correlation, valid positions only
    n = taps.size
    rows = sum(taps[k] * img[k : img.shape[0] - n + 1 + k, :] for k in range(n))
    return sum(taps[k] * rows[:, k : img.shape[1] - n + 1 + k] for k in range(n))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03, range 1).

    Averaged over the window positions that lie fully inside the image.
    """
    x, y = to_luma(a), to_luma(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_SIZE:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_SIZE}x{SSIM_SIZE} window")
    taps = gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mx, my = _filter_valid(x, taps), _filter_valid(y, taps)
    vx = _filter_valid(x * x, taps) - mx * mx
    vy = _filter_valid(y * y, taps) - my * my
    cxy = _filter_valid(x * y, taps) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    """Aggregate metrics over a set of predictions.

    ``mse`` and ``ssim`` are per-image means; ``psnr`` is derived from the
    mean MSE, so ``psnr == 10 log10(1 / mse)`` holds for every report.
    """

    mse: float
    psnr: float
    ssim: float
    count: int
    notes: dict = field(default_factory=dict)


def evaluate(predictions: Iterable[np.ndarray], truths: Iterable[np.ndarray]) -> EvalReport:
    """Average MSE and SSIM over paired streams, then PSNR from the mean MSE.

    Pairs with zero error stay in the mean; ``psnr`` is ``inf`` only when
    the mean itself is zero.
    """
    mses, ssims = [], []
    pred_iter, truth_iter = iter(predictions), iter(truths)
    sentinel = object()
    while True:
        p = next(pred_iter, sentinel)
        t = next(truth_iter, sentinel)
        if p is sentinel and t is sentinel:
            break
        if p is sentinel or t is sentinel:
            raise ValueError("prediction and truth streams differ in length")
        mses.append(mse_metric(p, t))
        ssims.append(ssim(p, t))
    if not mses:
        raise ValueError("nothing to evaluate")
    mean_mse = float(np.mean(mses))
    notes = {
        "psnr_convention": "from mean mse",
        "ssim_variant": f"gaussian {SSIM_SIZE}x{SSIM_SIZE} sigma={SSIM_SIGMA} K1={SSIM_K1} K2={SSIM_K2} luma",
        "zero_error_pairs": sum(m == 0 for m in mses),
    }
    return EvalReport(mean_mse, psnr(mean_mse), float(np.mean(ssims)), len(mses), notes)


def format_report(rows: dict[str, EvalReport]) -> str:
    """Tab-separated table (method, MSE, PSNR, SSIM) followed by key=value lines."""
    lines = ["method\tMSE\tPSNR\tSSIM"]
    for name, r in rows.items():
        lines.append(f"{name}\t{r.mse:.6f}\t{r.psnr:.3f}\t{r.ssim:.4f}")
    lines.append("")
    for name, r in rows.items():
        key = name.lower().replace(" ", "_")
        lines.append(f"{key}.mse={r.mse!r}")
        lines.append(f"{key}.psnr={r.psnr!r}")
        lines.append(f"{key}.ssim={r.ssim!r}")
        lines.append(f"{key}.count={r.count}")
        for k, v in r.notes.items():
            lines.append(f"{key}.{k}={v}")
    return "\n".join(lines) + "\n"
