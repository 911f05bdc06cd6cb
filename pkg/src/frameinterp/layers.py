"""Convolution, transposed convolution, displacement convolution, pooling, dense.

Every public op takes CHW or NCHW tensors and records itself on the active
tape. Internally the convolutions run in NHWC, one matmul per kernel tap,
which is several times faster in numpy than an explicit im2col buffer.

The ``*_forward``/``*_backward`` pairs on plain arrays are exposed so the
gradient rules can be tested on their own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, make_result

__all__ = [
    "ConvParams",
    "DclParams",
    "conv2d",
    "conv2d_backward",
    "conv2d_forward",
    "conv_transpose2d",
    "conv_transpose2d_backward",
    "conv_transpose2d_forward",
    "dcl",
    "dcl_backward",
    "dcl_forward",
    "dense",
    "maxpool2d",
    "out_extent",
]


@dataclass
class ConvParams:
    """Weights ``[out_ch, in_ch, k, k]``, bias ``[out_ch]``, stride and zero padding."""

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weights.shape
        if len(w) != 4 or w[2] != w[3]:
            raise ValueError(f"weights must be [out, in, k, k], got {w}")
        if self.bias.shape != (w[0],) and self.bias.shape != (w[1],):
            raise ValueError(f"bias shape {self.bias.shape} does not match weights {w}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be positive and padding non-negative")

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


@dataclass
class DclParams:
    """A stride-1 convolution whose window is recentred by a flow field."""

    conv: ConvParams

    def __post_init__(self):
        if self.conv.stride != 1:
            raise ValueError("displacement convolution requires stride 1")
        if self.conv.kernel % 2 != 1:
            raise ValueError("displacement convolution requires an odd kernel")


def out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _batched(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"{what}: expected CHW or NCHW input, got shape {x.shape}")


def _nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _taps(w: np.ndarray) -> np.ndarray:
    # [out, in, k, k] -> [k, k, in, out]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0))


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


# --- convolution -------------------------------------------------------------


def _conv_nhwc(xp: np.ndarray, wt: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    k = wt.shape[0]
    out = np.zeros((xp.shape[0], ho, wo, wt.shape[3]), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            out += xp[:, _window(ky, ho, stride), _window(kx, wo, stride), :] @ wt[ky, kx]
    return out


def _conv_adjoint_nhwc(g: np.ndarray, wt: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    k = wt.shape[0]
    n, ho, wo, _ = g.shape
    out = np.zeros((n, hp, wp, wt.shape[2]), dtype=g.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, _window(ky, ho, stride), _window(kx, wo, stride), :] += g @ wt[ky, kx].T
    return out


def _conv_input_grad(g: np.ndarray, wt: np.ndarray, stride: int, padding: int, h: int, w: int) -> np.ndarray:
    """Gradient w.r.t. the unpadded NHWC input of an NHWC convolution."""
    k = wt.shape[0]
    if stride == 1 and padding <= k - 1:
        # full correlation with the flipped kernel, restricted to the unpadded region
        edge = k - 1 - padding
        gp = np.pad(g, ((0, 0), (edge, edge), (edge, edge), (0, 0)))
        flipped = np.ascontiguousarray(wt[::-1, ::-1].transpose(0, 1, 3, 2))
        return _conv_nhwc(gp, flipped, 1, h, w)
    full = _conv_adjoint_nhwc(g, wt, stride, h + 2 * padding, w + 2 * padding)
    return full[:, padding : padding + h, padding : padding + w, :]


def _conv_weight_grad(xp: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, ho, wo, o = g.shape
    c = xp.shape[3]
    g2 = g.reshape(-1, o)
    gwt = np.empty((k, k, c, o), dtype=g.dtype)
    for ky in range(k):
        for kx in range(k):
            xs = xp[:, _window(ky, ho, stride), _window(kx, wo, stride), :]
            gwt[ky, kx] = np.ascontiguousarray(xs).reshape(-1, c).T @ g2
    return np.ascontiguousarray(gwt.transpose(3, 2, 0, 1))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int = 1, padding: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation on arrays (CHW or NCHW)."""
    x4, single = _batched(x, "conv2d")
    if x4.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input has {x4.shape[1]} channels, weights expect {w.shape[1]}")
    k = w.shape[2]
    ho = out_extent(x4.shape[2], k, stride, padding)
    wo = out_extent(x4.shape[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: input smaller than kernel")
    xp = np.pad(_nhwc(x4), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = _conv_nhwc(xp, _taps(w), stride, ho, wo)
    if b is not None:
        out += b
    out = _nchw(out)
    return out[0] if single else out


def conv2d_backward(upstream: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Gradients ``(input, weights, bias)`` of :func:`conv2d_forward`."""
    x4, single = _batched(x, "conv2d_backward")
    g4, _ = _batched(upstream, "conv2d_backward")
    n, c, h, wd = x4.shape
    k = w.shape[2]
    ho, wo = out_extent(h, k, stride, padding), out_extent(wd, k, stride, padding)
    if g4.shape != (n, w.shape[0], ho, wo):
        raise ValueError(f"conv2d_backward: upstream shape {upstream.shape} inconsistent with forward")
    g = _nhwc(g4)
    xp = np.pad(_nhwc(x4), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    gx = _nchw(_conv_input_grad(g, _taps(w), stride, padding, h, wd))
    gw = _conv_weight_grad(xp, g, k, stride)
    gb = g.sum(axis=(0, 1, 2))
    return (gx[0] if single else gx), gw, gb


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Tape-aware convolution."""
    w, b = p.weights, p.bias
    out = conv2d_forward(x.data, w.data, b.data, p.stride, p.padding)

    def rule(g):
        return conv2d_backward(g, x.data, w.data, p.stride, p.padding)

    return make_result(out, (x, w, b), rule, "conv2d")


# --- transposed convolution --------------------------------------------------


def _tconv_extent(size: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def conv_transpose2d_forward(
    y: np.ndarray,
    w: np.ndarray,
    b: Optional[np.ndarray],
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward` for weights ``w = [out, in, k, k]``.

    Maps ``out`` channels back to ``in`` channels; ``b`` has ``in`` entries.
    ``output_padding`` (an int or a per-axis pair) selects among the input
    sizes that a strided convolution maps to the same output size.
    """
    y4, single = _batched(y, "conv_transpose2d")
    if y4.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: input has {y4.shape[1]} channels, weights expect {w.shape[0]}")
    op_h, op_w = (output_padding, output_padding) if np.isscalar(output_padding) else output_padding
    for op in (op_h, op_w):
        if op < 0 or (op and op >= stride):
            raise ValueError("output_padding must be smaller than stride")
    k = w.shape[2]
    n, _, hy, wy = y4.shape
    h = _tconv_extent(hy, k, stride, padding, op_h)
    wd = _tconv_extent(wy, k, stride, padding, op_w)
    if h < 1 or wd < 1:
        raise ValueError("conv_transpose2d: non-positive output extent")
    full = _conv_adjoint_nhwc(_nhwc(y4), _taps(w), stride, h + 2 * padding, wd + 2 * padding)
    out = full[:, padding : padding + h, padding : padding + wd, :]
    if b is not None:
        out = out + b
    out = _nchw(out)
    return out[0] if single else out


def conv_transpose2d_backward(upstream: np.ndarray, y: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Gradients ``(input, weights, bias)`` of :func:`conv_transpose2d_forward`."""
    y4, single = _batched(y, "conv_transpose2d_backward")
    g4, _ = _batched(upstream, "conv_transpose2d_backward")
    n, o, hy, wy = y4.shape
    k = w.shape[2]
    if g4.shape[:2] != (n, w.shape[1]):
        raise ValueError(f"conv_transpose2d_backward: upstream shape {upstream.shape} inconsistent with forward")
    h, wd = g4.shape[2], g4.shape[3]
    gp = np.pad(_nhwc(g4), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    gy = _conv_nhwc(gp, _taps(w), stride, hy, wy)
    yh = _nhwc(y4)
    gwt = np.empty((k, k, w.shape[1], o), dtype=gp.dtype)
    y2 = yh.reshape(-1, o)
    for ky in range(k):
        for kx in range(k):
            gs = gp[:, _window(ky, hy, stride), _window(kx, wy, stride), :]
            gwt[ky, kx] = np.ascontiguousarray(gs).reshape(-1, w.shape[1]).T @ y2
    gw = np.ascontiguousarray(gwt.transpose(3, 2, 0, 1))
    gb = g4.sum(axis=(0, 2, 3))
    gy = _nchw(gy)
    return (gy[0] if single else gy), gw, gb


def conv_transpose2d(y: Tensor, p: ConvParams, output_padding=0) -> Tensor:
    """Tape-aware transposed convolution; ``p.bias`` has ``p.in_ch`` entries."""
    w, b = p.weights, p.bias
    out = conv_transpose2d_forward(y.data, w.data, b.data, p.stride, p.padding, output_padding)

    def rule(g):
        return conv_transpose2d_backward(g, y.data, w.data, p.stride, p.padding)

    return make_result(out, (y, w, b), rule, "conv_transpose2d")


# --- displacement convolution ------------------------------------------------


class _DclPlan:
    """Bilinear interpolation of a conv response at the displaced centres.

    Because the whole window moves rigidly, sampling the input bilinearly and
    then convolving equals convolving first and sampling the response. The
    response is computed on an (H+1) x (W+1) grid so that the upper corner of
    every clamped centre exists. ``matrix`` maps the flattened response to
    the flattened output (four non-zeros per row).
    """

    def __init__(self, flow4: np.ndarray, h: int, w: int, dtype):
        from scipy import sparse

        n = flow4.shape[0]
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx_raw = jj[None] + flow4[:, 0].astype(np.float64)
        cy_raw = ii[None] + flow4[:, 1].astype(np.float64)
        cx = np.clip(cx_raw, 0, w - 1)
        cy = np.clip(cy_raw, 0, h - 1)
        self.free_x = (cx_raw >= 0) & (cx_raw <= w - 1)
        self.free_y = (cy_raw >= 0) & (cy_raw <= h - 1)
        x0 = np.floor(cx).astype(np.intp)
        y0 = np.floor(cy).astype(np.intp)
        fx = cx - x0
        fy = cy - y0
        rw = w + 1
        base = (np.arange(n)[:, None, None] * (h + 1) + y0) * rw + x0
        self.corners = [base, base + 1, base + rw, base + rw + 1]
        self.fx = fx.astype(dtype)
        self.fy = fy.astype(dtype)
        weights = [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx]
        rows = np.repeat(np.arange(n * h * w), 4)
        cols = np.stack([c.reshape(-1) for c in self.corners], axis=1).reshape(-1)
        vals = np.stack([v.reshape(-1) for v in weights], axis=1).reshape(-1).astype(dtype)
        self.matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(n * h * w, n * (h + 1) * rw))
        self.shape = (n, h, w)


def _dcl_response(x4: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = w.shape[2] // 2
    h, wd = x4.shape[2], x4.shape[3]
    xp = np.pad(_nhwc(x4), ((0, 0), (half, half + 1), (half, half + 1), (0, 0)))
    return xp, _conv_nhwc(xp, _taps(w), 1, h + 1, wd + 1)


def _check_dcl(x4: np.ndarray, flow4: np.ndarray, w: np.ndarray) -> None:
    if x4.shape[1] != w.shape[1]:
        raise ValueError(f"dcl: input has {x4.shape[1]} channels, weights expect {w.shape[1]}")
    if w.shape[2] % 2 != 1:
        raise ValueError("dcl: kernel must be odd")
    n, _, h, wd = x4.shape
    if flow4.shape != (n, 2, h, wd):
        raise ValueError(f"dcl: flow shape {flow4.shape} does not match input extent {(n, 2, h, wd)}")


def dcl_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], flow: np.ndarray) -> np.ndarray:
    """Displacement convolution on arrays.

    Output pixel (i, j) is the convolution window of ``w`` evaluated around
    the centre (i + dy, j + dx), where ``flow[0] = dx`` and ``flow[1] = dy``.
    The centre is clamped to the image, the window itself reads zero padding,
    and fractional positions are sampled bilinearly. With zero flow this is
    exactly :func:`conv2d_forward` with stride 1 and padding ``k // 2``.
    """
    x4, single = _batched(x, "dcl")
    f4, _ = _batched(flow, "dcl")
    _check_dcl(x4, f4, w)
    n, _, h, wd = x4.shape
    plan = _DclPlan(f4, h, wd, x4.dtype)
    _, resp = _dcl_response(x4, w)
    out = (plan.matrix @ resp.reshape(-1, w.shape[0])).reshape(n, h, wd, w.shape[0])
    if b is not None:
        out += b
    out = _nchw(out)
    return out[0] if single else out


def dcl_backward(upstream: np.ndarray, x: np.ndarray, w: np.ndarray, flow: np.ndarray):
    """Gradients ``(input, weights, bias, flow)`` of :func:`dcl_forward`.

    The flow gradient is zero along an axis where the displaced centre was
    clamped to the border.
    """
    x4, single = _batched(x, "dcl_backward")
    f4, _ = _batched(flow, "dcl_backward")
    g4, _ = _batched(upstream, "dcl_backward")
    _check_dcl(x4, f4, w)
    n, _, h, wd = x4.shape
    o = w.shape[0]
    if g4.shape != (n, o, h, wd):
        raise ValueError(f"dcl_backward: upstream shape {upstream.shape} inconsistent with forward")
    k = w.shape[2]
    half = k // 2
    plan = _DclPlan(f4, h, wd, x4.dtype)
    xp, resp = _dcl_response(x4, w)
    g = _nhwc(g4)
    g2 = g.reshape(-1, o)
    g_resp = np.asarray(plan.matrix.T @ g2).reshape(n, h + 1, wd + 1, o)

    flat = resp.reshape(-1, o)
    r00, r01, r10, r11 = (flat[c.reshape(-1)] for c in plan.corners)
    fx = plan.fx.reshape(-1, 1)
    fy = plan.fy.reshape(-1, 1)
    gfx = (g2 * ((1 - fy) * (r01 - r00) + fy * (r11 - r10))).sum(axis=1).reshape(n, h, wd)
    gfy = (g2 * ((1 - fx) * (r10 - r00) + fx * (r11 - r01))).sum(axis=1).reshape(n, h, wd)
    gflow = np.stack([gfx * plan.free_x, gfy * plan.free_y], axis=1).astype(g.dtype)

    gxp = _conv_adjoint_nhwc(g_resp, _taps(w), 1, xp.shape[1], xp.shape[2])
    gx = _nchw(gxp[:, half : half + h, half : half + wd, :])  # drops the extra zero row/col
    gw = _conv_weight_grad(xp, g_resp, k, 1)
    gb = g2.sum(axis=0)
    if single:
        return gx[0], gw, gb, gflow[0]
    return gx, gw, gb, gflow


def dcl(x: Tensor, p: DclParams, flow: Tensor) -> Tensor:
    """Tape-aware displacement convolution; ``flow`` is ``[2, H, W]`` (dx, dy)."""
    w, b = p.conv.weights, p.conv.bias
    out = dcl_forward(x.data, w.data, b.data, flow.data)

    def rule(g):
        return dcl_backward(g, x.data, w.data, flow.data)

    return make_result(out, (x, w, b, flow), rule, "dcl")


# --- pooling and dense -------------------------------------------------------


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x4, single = _batched(x.data, "maxpool2d")
    n, c, h, w = x4.shape
    ho, wo = h // window, w // window
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool2d: input {x.shape} smaller than window {window}")
    blocks = x4[:, :, : ho * window, : wo * window].reshape(n, c, ho, window, wo, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def rule(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        g4 = g[None] if single else g
        np.put_along_axis(onehot, arg[..., None], g4[..., None], axis=-1)
        grid = onehot.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros((n, c, h, w), dtype=g.dtype)
        full[:, :, : ho * window, : wo * window] = grid.reshape(n, c, ho * window, wo * window)
        return (full.reshape(shape),)

    return make_result(out[0] if single else out, (x,), rule, "maxpool2d")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape ``[D]`` or ``[N, D]``."""
    xd, w, b = x.data, weights.data, bias.data
    if xd.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"dense: input {xd.shape}, weights {w.shape}, bias {b.shape} are inconsistent")
    out = xd @ w.T + b

    def rule(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = xd.reshape(-1, w.shape[1])
        return (g @ w, g2.T @ x2, g2.sum(axis=0))

    return make_result(out, (x, weights, bias), rule, "dense")
