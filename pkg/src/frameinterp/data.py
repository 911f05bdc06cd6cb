"""Frame I/O, triplet extraction and a synthetic moving-shapes generator.

Images are float CHW arrays in [0, 1]. Binary PPM (P6) is handled here
directly; PNG goes through Pillow.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .flow import FlowField, load_flo, sample_bilinear, save_flo

__all__ = [
    "FrameTriplet",
    "Shape",
    "SynthSpec",
    "SyntheticSet",
    "chain_flows",
    "extract_triplets",
    "load_image",
    "make_synthetic_set",
    "random_crop",
    "random_synth_spec",
    "read_manifest",
    "render_frame",
    "save_image",
    "split_dataset",
    "synth_sequence",
    "write_manifest",
    "motion_interior",
    "write_sequence",
]


@dataclass
class FrameTriplet:
    first: np.ndarray
    middle_truth: np.ndarray
    second: np.ndarray
    flow_1_to_2: Optional[FlowField] = None

    def __post_init__(self):
        shapes = {self.first.shape, self.middle_truth.shape, self.second.shape}
        if len(shapes) != 1:
            raise ValueError(f"triplet members differ in extent: {sorted(shapes)}")
        if self.flow_1_to_2 is not None and (self.flow_1_to_2.height, self.flow_1_to_2.width) != self.first.shape[1:]:
            raise ValueError("flow extent does not match the frames")


# --- image files -------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _decode_ppm(data: bytes) -> np.ndarray:
    fields = []
    pos = 0
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise ValueError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ValueError(f"unsupported PPM variant {fields[0]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ValueError("malformed PPM header") from exc
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    if width <= 0 or height <= 0:
        raise ValueError("non-positive PPM extent")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    if len(data) < pos + need:
        raise ValueError("truncated PPM payload")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return raw.reshape(height, width, 3).transpose(2, 0, 1) / 255.0


def _to_bytes_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW image, got {image.shape}")
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> np.ndarray:
    """Read an 8-bit PPM (P6) or PNG as a float CHW array in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6":
        return _decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        try:
            with Image.open(io.BytesIO(data)) as im:
                arr = np.asarray(im.convert("RGB"))
        except OSError as exc:
            raise ValueError(f"cannot decode {path}: {exc}") from exc
        return arr.transpose(2, 0, 1) / 255.0
    raise ValueError(f"unsupported image format: {path}")


def save_image(image: np.ndarray, path) -> None:
    """Write a CHW image; ``.png`` via Pillow, anything else as binary PPM."""
    path = Path(path)
    hwc = _to_bytes_hwc(image)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(hwc, mode="RGB").save(path)
    else:
        h, w, _ = hwc.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + hwc.tobytes())


def read_manifest(path) -> list[Path]:
    """One path per line; relative entries resolve against the manifest's directory."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def write_manifest(paths: Sequence, path) -> None:
    path = Path(path)
    lines = []
    for p in paths:
        p = Path(p)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(str(p))
    path.write_text("\n".join(lines) + "\n")


# --- triplets ----------------------------------------------------------------


def chain_flows(a: FlowField, b: FlowField) -> FlowField:
    """Compose k->k+1 and k+1->k+2 flows into k->k+2."""
    ii, jj = np.meshgrid(np.arange(a.height), np.arange(a.width), indexing="ij")
    later = sample_bilinear(b.to_array(), jj + a.dx, ii + a.dy)
    return FlowField(a.dx + later[0], a.dy + later[1])


def extract_triplets(frame_paths: Sequence, flow_paths: Optional[Sequence] = None) -> Iterator[FrameTriplet]:
    """Every window of three consecutive frames, stride 1 (N frames give N - 2).

    ``flow_paths[k]`` (optional) is the flow from frame k to frame k + 1;
    the triplet's flow is the two-step composition.
    """
    frame_paths = list(frame_paths)
    if len(frame_paths) < 3:
        raise ValueError(f"need at least 3 frames, got {len(frame_paths)}")
    if flow_paths is not None and len(flow_paths) < len(frame_paths) - 1:
        raise ValueError("need one flow per consecutive frame pair")
    window: list[np.ndarray] = []
    shape = None
    prev_flow = None
    for k, p in enumerate(frame_paths):
        img = load_image(p)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(f"frame {p} has extent {img.shape}, expected {shape}")
        window = (window + [img])[-3:]
        if len(window) == 3:
            flow = None
            if flow_paths is not None:
                # frames k-2, k-1, k: compose flows k-2 and k-1
                step = load_flo(flow_paths[k - 1])
                flow = chain_flows(prev_flow or load_flo(flow_paths[k - 2]), step)
                prev_flow = step
            yield FrameTriplet(window[0], window[1], window[2], flow)


def split_dataset(items: Sequence, ratio: float, seed: int) -> tuple[list, list]:
    """Deterministic shuffled split into (train, eval)."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    items = list(items)
    if not items:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(items))
    cut = int(round(ratio * len(items)))
    return [items[i] for i in order[:cut]], [items[i] for i in order[cut:]]


def random_crop(triplet: FrameTriplet, size: int, rng: np.random.Generator) -> FrameTriplet:
    _, h, w = triplet.first.shape
    if size > min(h, w):
        raise ValueError(f"crop {size} larger than frame {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    cut = (slice(None), slice(y, y + size), slice(x, x + size))
    flow = None
    if triplet.flow_1_to_2 is not None:
        f = triplet.flow_1_to_2
        flow = FlowField(f.dx[cut[1:]], f.dy[cut[1:]])
    return FrameTriplet(triplet.first[cut], triplet.middle_truth[cut], triplet.second[cut], flow)


# --- synthetic sequences -----------------------------------------------------


@dataclass
class Shape:
    """A flat-or-ramp coloured rectangle or disk moving at constant velocity.

    ``center`` is the position at frame 0 in pixel coordinates (pixel
    centres at integers). ``size`` is (half-width, half-height) for a
    rectangle and (radius, radius) for a disk. ``slope`` is a 3x2 colour
    gradient per pixel, so the fill is ``color + slope @ (x - cx, y - cy)``.
    """

    kind: str
    center: tuple[float, float]
    size: tuple[float, float]
    color: tuple[float, float, float]
    velocity: tuple[float, float]
    slope: Optional[np.ndarray] = None

    def position(self, t: float) -> tuple[float, float]:
        return self.center[0] + t * self.velocity[0], self.center[1] + t * self.velocity[1]

    def bounds(self, t: float) -> tuple[float, float, float, float]:
        cx, cy = self.position(t)
        return cx - self.size[0], cy - self.size[1], cx + self.size[0], cy + self.size[1]


@dataclass
class SynthSpec:
    width: int
    height: int
    shapes: list[Shape]
    frames: int = 3
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    texture: float = 0.0
    seed: int = 0


def _coverage_1d(centers: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip(np.minimum(centers + 0.5, hi) - np.maximum(centers - 0.5, lo), 0.0, 1.0)


def _coverage(shape: Shape, t: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    cx, cy = shape.position(t)
    if shape.kind == "rect":
        return np.outer(
            _coverage_1d(ys, cy - shape.size[1], cy + shape.size[1]),
            _coverage_1d(xs, cx - shape.size[0], cx + shape.size[0]),
        )
    if shape.kind == "disk":
        dist = np.hypot(xs[None, :] - cx, ys[:, None] - cy)
        return np.clip(shape.size[0] + 0.5 - dist, 0.0, 1.0)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _background(spec: SynthSpec) -> np.ndarray:
    img = np.empty((3, spec.height, spec.width))
    img[:] = np.asarray(spec.background, dtype=np.float64)[:, None, None]
    if spec.texture > 0:
        rng = np.random.default_rng(spec.seed)
        ys, xs = np.mgrid[0 : spec.height, 0 : spec.width] / max(spec.height, spec.width)
        for _ in range(3):
            freq = rng.uniform(1.0, 4.0, size=2) * 2 * np.pi
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.3, 1.0, size=3) * spec.texture
            wave = np.sin(freq[0] * xs + freq[1] * ys + phase)
            img += amp[:, None, None] * wave[None]
    return np.clip(img, 0.0, 1.0)


def _check_inside(spec: SynthSpec) -> None:
    for n, shape in enumerate(spec.shapes):
        for t in range(spec.frames):
            x0, y0, x1, y1 = shape.bounds(t)
            if x0 < -0.5 or y0 < -0.5 or x1 > spec.width - 0.5 or y1 > spec.height - 0.5:
                raise ValueError(f"shape {n} leaves the canvas at frame {t}")


def render_frame(spec: SynthSpec, t: float, background: Optional[np.ndarray] = None) -> np.ndarray:
    """Anti-aliased render with exact area coverage for rectangles."""
    img = _background(spec) if background is None else background.copy()
    xs = np.arange(spec.width, dtype=np.float64)
    ys = np.arange(spec.height, dtype=np.float64)
    for shape in spec.shapes:
        cov = _coverage(shape, t, xs, ys)
        cx, cy = shape.position(t)
        fill = np.empty_like(img)
        fill[:] = np.asarray(shape.color, dtype=np.float64)[:, None, None]
        if shape.slope is not None:
            slope = np.asarray(shape.slope, dtype=np.float64)
            dxs = (xs - cx)[None, None, :]
            dys = (ys - cy)[None, :, None]
            fill += slope[:, 0, None, None] * dxs + slope[:, 1, None, None] * dys
        img = img * (1.0 - cov) + fill * cov
    return np.clip(img, 0.0, 1.0)


def _motion(spec: SynthSpec, t: int) -> FlowField:
    xs = np.arange(spec.width, dtype=np.float64)
    ys = np.arange(spec.height, dtype=np.float64)
    dx = np.zeros((spec.height, spec.width))
    dy = np.zeros((spec.height, spec.width))
    for shape in spec.shapes:
        inside = _coverage(shape, t, xs, ys) >= 0.5
        dx[inside] = shape.velocity[0]
        dy[inside] = shape.velocity[1]
    return FlowField(dx, dy)


def motion_interior(flows: Sequence[FlowField], radius: int) -> np.ndarray:
    """Pixels whose neighbourhood of ``radius`` has one constant motion in every field.

    Away from motion boundaries and occlusions, warping with exact flow is
    exact; this mask selects those pixels for oracle comparisons.
    """
    from scipy.ndimage import maximum_filter, minimum_filter

    h, w = flows[0].height, flows[0].width
    keep = np.ones((h, w), dtype=bool)
    size = 2 * radius + 1
    ref_dx, ref_dy = flows[0].dx, flows[0].dy
    for f in flows:
        for comp, ref in ((f.dx, ref_dx), (f.dy, ref_dy)):
            lo = minimum_filter(comp, size=size, mode="nearest")
            hi = maximum_filter(comp, size=size, mode="nearest")
            keep &= (lo == hi) & (comp == ref)
    keep[:radius, :] = keep[-radius:, :] = False
    keep[:, :radius] = keep[:, -radius:] = False
    return keep


def synth_sequence(spec: SynthSpec) -> tuple[list[np.ndarray], list[FlowField]]:
    """Render ``spec.frames`` frames and the exact flow between consecutive frames.

    Flow k is defined on frame k's pixels: the velocity of the topmost shape
    covering at least half of the pixel, zero on the background.
    """
    if spec.frames < 1 or spec.width < 1 or spec.height < 1:
        raise ValueError("invalid synthetic spec")
    _check_inside(spec)
    bg = _background(spec)
    frames = [render_frame(spec, t, bg) for t in range(spec.frames)]
    flows = [_motion(spec, t) for t in range(spec.frames - 1)]
    return frames, flows


def random_synth_spec(
    rng: np.random.Generator,
    size: int = 64,
    frames: int = 3,
    max_speed: float = 6.0,
    min_speed: float = 0.5,
    shapes: tuple[int, int] = (1, 3),
    texture: float = 0.15,
) -> SynthSpec:
    """Random scene whose shapes stay on the canvas for every frame."""
    placed = []
    for _ in range(int(rng.integers(shapes[0], shapes[1] + 1))):
        for _attempt in range(100):
            kind = "rect" if rng.random() < 0.5 else "disk"
            if kind == "rect":
                half = tuple(rng.uniform(0.08, 0.2, size=2) * size)
            else:
                r = rng.uniform(0.08, 0.18) * size
                half = (r, r)
            speed = rng.uniform(min_speed, max_speed)
            angle = rng.uniform(0, 2 * np.pi)
            vel = (speed * np.cos(angle), speed * np.sin(angle))
            travel = (frames - 1) * np.abs(vel)
            lo = np.array(half) - 0.5 + np.maximum(0, -np.array(vel) * (frames - 1))
            hi = size - 0.5 - np.array(half) - np.maximum(0, np.array(vel) * (frames - 1))
            if np.all(hi - lo > 0) and np.all(travel < size):
                center = tuple(rng.uniform(lo, hi))
                color = tuple(rng.uniform(0.25, 0.75, size=3))
                slope = rng.uniform(-1, 1, size=(3, 2)) * 0.1 / max(half)
                placed.append(Shape(kind, center, half, color, vel, slope))
                break
    bg = tuple(rng.uniform(0.2, 0.8, size=3))
    return SynthSpec(size, size, placed, frames, bg, texture, int(rng.integers(2**31)))


@dataclass
class SyntheticSet:
    """Triplets plus, per triplet, the true flow sampled on the middle frame.

    ``middle_flows[k]`` is the first-to-second displacement of whatever is
    visible at each middle-frame pixel (zero on the static background).
    """

    triplets: list[FrameTriplet]
    middle_flows: list[FlowField] = field(default_factory=list)
    specs: list[SynthSpec] = field(default_factory=list)


def make_synthetic_set(count: int, size: int = 64, max_speed: float = 6.0, seed: int = 0, **kwargs) -> SyntheticSet:
    """``count`` independent three-frame scenes, one triplet each."""
    rng = np.random.default_rng(seed)
    out = SyntheticSet([], [], [])
    for _ in range(count):
        spec = random_synth_spec(rng, size=size, frames=3, max_speed=max_speed, **kwargs)
        frames, flows = synth_sequence(spec)
        out.triplets.append(FrameTriplet(frames[0], frames[1], frames[2], flows[0].scaled(2.0)))
        out.middle_flows.append(flows[1].scaled(2.0))
        out.specs.append(spec)
    return out


def write_sequence(frames: Sequence[np.ndarray], flows: Sequence[FlowField], out_dir) -> tuple[Path, Path]:
    """Write frames (PPM), flows (.flo) and their manifests; returns the manifest paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame_paths, flow_paths = [], []
    for k, frame in enumerate(frames):
        p = out_dir / f"frame_{k:05d}.ppm"
        save_image(frame, p)
        frame_paths.append(p)
    for k, f in enumerate(flows):
        p = out_dir / f"flow_{k:05d}.flo"
        save_flo(f, p)
        flow_paths.append(p)
    frames_manifest = out_dir / "frames.txt"
    flows_manifest = out_dir / "flows.txt"
    write_manifest(frame_paths, frames_manifest)
    write_manifest(flow_paths, flows_manifest)
    return frames_manifest, flows_manifest
