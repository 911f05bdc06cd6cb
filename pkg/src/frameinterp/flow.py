"""Optical-flow fields, Middlebury ``.flo`` I/O and the non-learned baselines."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "FLO_MAGIC",
    "FlowField",
    "average_frames",
    "bilinear_sample",
    "load_flo",
    "read_flo",
    "sample_bilinear",
    "save_flo",
    "warp_backward",
    "warp_middle",
    "write_flo",
]

FLO_MAGIC = 202021.25


@dataclass
class FlowField:
    """Per-pixel displacement in pixels.

    Pixel (i, j) of the source frame moves to (j + dx[i, j], i + dy[i, j])
    in the target frame.
    """

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float64)
        self.dy = np.asarray(self.dy, dtype=np.float64)
        if self.dx.ndim != 2 or self.dx.shape != self.dy.shape:
            raise ValueError(f"dx {self.dx.shape} and dy {self.dy.shape} must be equal 2-D arrays")
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise ValueError("flow contains non-finite values")

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FlowField":
        """From a ``[2, H, W]`` array holding (dx, dy)."""
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError(f"expected [2, H, W], got {arr.shape}")
        return cls(arr[0], arr[1])

    def to_array(self) -> np.ndarray:
        return np.stack([self.dx, self.dy])

    def scaled(self, factor: float) -> "FlowField":
        return FlowField(self.dx * factor, self.dy * factor)


def read_flo(data: bytes) -> FlowField:
    """Decode a Middlebury ``.flo`` byte string."""
    if len(data) < 12:
        raise ValueError("truncated .flo header")
    magic, width, height = struct.unpack_from("<fii", data, 0)
    if magic != np.float32(FLO_MAGIC):
        raise ValueError(f"bad .flo magic {magic!r}")
    if width <= 0 or height <= 0:
        raise ValueError(f"non-positive .flo extent {width}x{height}")
    count = 2 * width * height
    if len(data) < 12 + 4 * count:
        raise ValueError("truncated .flo payload")
    uv = np.frombuffer(data, dtype="<f4", count=count, offset=12).reshape(height, width, 2)
    return FlowField(uv[..., 0].astype(np.float64), uv[..., 1].astype(np.float64))


def write_flo(field: FlowField) -> bytes:
    """Encode as ``.flo``: f32 magic, i32 width, i32 height, interleaved f32 (u, v)."""
    uv = np.stack([field.dx, field.dy], axis=-1).astype("<f4")
    return struct.pack("<fii", FLO_MAGIC, field.width, field.height) + uv.tobytes()


def load_flo(path) -> FlowField:
    return read_flo(Path(path).read_bytes())


def save_flo(field: FlowField, path) -> None:
    Path(path).write_bytes(write_flo(field))


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a CHW image at real coordinates (clamped to the image).

    ``xs``/``ys`` share one shape S; the result has shape ``[C, *S]``.
    """
    c, h, w = image.shape
    x = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    y = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2) if w > 1 else np.zeros(x.shape, np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2) if h > 1 else np.zeros(y.shape, np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = image[:, y0, x0] * (1 - fx) + image[:, y0, x1] * fx
    bottom = image[:, y1, x0] * (1 - fx) + image[:, y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def bilinear_sample(image: np.ndarray, x: float, y: float) -> np.ndarray:
    """Per-channel bilinear value at one point; out-of-range coordinates clamp."""
    return sample_bilinear(image, np.asarray(x), np.asarray(y))


def _check_extent(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: extent mismatch {a.shape} vs {b.shape}")


def _check_flow(name: str, image: np.ndarray, flow: FlowField) -> None:
    if (flow.height, flow.width) != image.shape[1:]:
        raise ValueError(f"{name}: flow {flow.height}x{flow.width} does not match image {image.shape}")


def average_frames(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    _check_extent("average_frames", first, second)
    return 0.5 * (np.asarray(first) + np.asarray(second))


def warp_backward(image: np.ndarray, flow: FlowField, fraction: float = 1.0) -> np.ndarray:
    """``out(p) = image(p - fraction * flow(p))`` with bilinear gather."""
    _check_flow("warp_backward", image, flow)
    ii, jj = np.meshgrid(np.arange(flow.height), np.arange(flow.width), indexing="ij")
    return sample_bilinear(image, jj - fraction * flow.dx, ii - fraction * flow.dy)


def warp_middle(first: np.ndarray, second: np.ndarray, flow: FlowField) -> np.ndarray:
    """Symmetric midpoint warp: mean of first(p - F/2) and second(p + F/2).

    ``flow`` points from ``first`` to ``second``.
    """
    _check_extent("warp_middle", first, second)
    _check_flow("warp_middle", first, flow)
    return 0.5 * warp_backward(first, flow, 0.5) + 0.5 * warp_backward(second, flow, -0.5)
