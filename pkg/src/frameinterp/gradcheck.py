"""Central finite-difference checks for every differentiable op.

The oracle perturbs each input element in turn and never touches the
tape, so it is independent of the backward rules it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import layers, tensor
from .tensor import Tape, Tensor, precision

__all__ = ["gradcheck", "numerical_gradients", "run_suite", "suite_cases"]


def numerical_gradients(f: Callable[..., float], arrays: Sequence[np.ndarray], eps: float = 1e-4) -> list[np.ndarray]:
    """d f / d a for every element of every array, by central differences."""
    out = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = f(*arrays)
            flat[i] = keep - eps
            down = f(*arrays)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * eps)
        out.append(grad)
    return out


def gradcheck(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-4,
    seed: int = 0,
) -> list[float]:
    """Compare tape gradients of ``fn`` with finite differences.

    ``fn`` maps tensors to a tensor; it is reduced to a scalar through a
    fixed random projection. Returns one max relative error per input,
    measured as ``|analytic - numeric| / max(1, |analytic|)``.
    """
    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = fn(*[Tensor(a) for a in arrays])
        weights = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar(*arrs):
            return float((fn(*[Tensor(a) for a in arrs]).data * weights).sum())

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape():
            y = fn(*leaves)
            loss = tensor.reduce_sum(tensor.mul(y, Tensor(weights)))
            tensor.backward(loss)
        numeric = numerical_gradients(scalar, arrays, eps)
    errors = []
    for leaf, num in zip(leaves, numeric):
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        errors.append(float(np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(ana)))))
    return errors


def _away_from_integers(values: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    frac = values - np.round(values)
    bump = np.where(np.abs(frac) < margin, np.sign(frac + 1e-12) * 2 * margin, 0.0)
    return values + bump


def suite_cases(seed: int = 0) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    """Named ``(fn, inputs)`` cases covering every layer and elementwise op."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    flow = _away_from_integers(rng.uniform(-1.4, 1.4, size=(2, 5, 5)))

    def conv(x, w, b):
        return layers.conv2d(x, layers.ConvParams(w, b, stride=1, padding=1))

    def conv_strided(x, w, b):
        return layers.conv2d(x, layers.ConvParams(w, b, stride=2, padding=1))

    def tconv(y, w, b):
        return layers.conv_transpose2d(y, layers.ConvParams(w, b, stride=2, padding=1), output_padding=1)

    def dcl(x, w, b, f):
        return layers.dcl(x, layers.DclParams(layers.ConvParams(w, b, stride=1, padding=1)), f)

    def dense_stack(x, w, b):
        return tensor.tanh(layers.dense(x, w, b))

    def pool_stack(x, w, b):
        h = tensor.leaky_relu(conv(x, w, b))
        return layers.maxpool2d(h, 2)

    def elementwise_chain(a, b):
        h = tensor.add(tensor.mul(a, b), tensor.square(tensor.sub(a, b)))
        h = tensor.add(tensor.sigmoid(h), tensor.tanh(tensor.scale(a, 0.5)))
        h = tensor.add(h, tensor.relu(b))
        return tensor.log(tensor.add(tensor.exp(h), tensor.exp(a)))

    return {
        "conv2d": (conv, [r((1, 4, 4)), r((2, 1, 3, 3)), r(2)]),
        "conv2d_stride2": (conv_strided, [r((2, 5, 5)), r((3, 2, 3, 3)), r(3)]),
        "conv_transpose2d": (tconv, [r((3, 2, 2)), r((3, 2, 3, 3)), r(2)]),
        "dcl": (dcl, [r((1, 5, 5)), r((2, 1, 3, 3)), r(2), flow]),
        "dense": (dense_stack, [r((2, 6)), r((3, 6)), r(3)]),
        "maxpool2d": (pool_stack, [r((1, 4, 4)), r((2, 1, 3, 3)), r(2)]),
        "elementwise": (elementwise_chain, [r((2, 3)), r((2, 3))]),
    }


def run_suite(seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    """Max relative error per case (over all of that case's inputs)."""
    return {name: max(gradcheck(fn, arrays, eps=eps, seed=seed)) for name, (fn, arrays) in suite_cases(seed).items()}
