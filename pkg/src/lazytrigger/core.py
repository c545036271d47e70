"""Numeric primitives shared by dense training and lazy inference.

Tensors are plain ``numpy`` arrays of shape ``(channels, height, width)``
in float64. Activation maps are 2-d arrays ``(height, width)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class FormatError(ValueError):
    """Raised when a serialized file is malformed.

    ``offset`` is the byte offset (or ``None`` for text formats) where
    parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class ConvSpec:
    """Convolution weights: ``kernels`` is ``(l, m, k, k)``, ``biases`` is ``(l,)``."""

    kernels: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ContractError(f"kernels must be (l, m, k, k), got {self.kernels.shape}")
        l, m, k, _ = self.kernels.shape
        if k % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {k}")
        if l < 1 or m < 1:
            raise ContractError("need at least one filter and one input channel")
        if self.biases.shape != (l,):
            raise ContractError(f"biases must have shape ({l},), got {self.biases.shape}")

    @property
    def m(self) -> int:
        return self.kernels.shape[1]

    @property
    def l(self) -> int:  # noqa: E743
        return self.kernels.shape[0]

    @property
    def k(self) -> int:
        return self.kernels.shape[2]

    @property
    def radius(self) -> int:
        return self.kernels.shape[2] // 2


@dataclass
class TriggerParams:
    """Logistic-regression trigger over feature channels."""

    weights: np.ndarray
    bias: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.bias = float(self.bias)
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise ContractError("trigger parameters must be finite")


def logistic(z):
    return expit(z)


def _as_tensor(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ContractError(f"expected a (channels, height, width) tensor, got shape {x.shape}")
    return x


def conv_windows(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded ``k x k`` windows of ``x[..., H, W]`` -> ``x[..., H, W, k, k]``."""
    r = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    return sliding_window_view(np.pad(x, pad), (k, k), axis=(-2, -1))


def kernel_sum(windows: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """``windows[..., m, k, k]`` against ``kernels (l, m, k, k)`` -> ``[..., l]``.

    Terms are accumulated elementwise in a fixed (channel, row, column)
    order, so a position gets bit-identical results whether it is computed
    in a dense pass, a batch, or alone in the lazy engine.
    """
    l, m, k, _ = kernels.shape
    out = None
    for c in range(m):
        for i in range(k):
            for j in range(k):
                term = windows[..., c, i, j, None] * kernels[:, c, i, j]
                out = term if out is None else out + term
    return out


def channel_sum(features: np.ndarray, weights: np.ndarray, axis: int = 0) -> np.ndarray:
    """Weighted sum over ``axis``, in channel order (see :func:`kernel_sum`)."""
    out = None
    for c, w in enumerate(weights):
        term = np.take(features, c, axis=axis) * w
        out = term if out is None else out + term
    return out


def conv2d(x, spec: ConvSpec) -> np.ndarray:
    """Same-size zero-padded, stride-1 convolution (cross-correlation form)."""
    x = _as_tensor(x)
    if x.shape[0] != spec.m:
        raise ContractError(f"input has {x.shape[0]} channels, kernel expects {spec.m}")
    windows = np.moveaxis(conv_windows(x, spec.k), 0, 2)  # (h, w, m, k, k)
    out = np.moveaxis(kernel_sum(windows, spec.kernels), -1, 0)
    return out + spec.biases[:, None, None]


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def _pool_blocks(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(f"max-pooling needs even height and width, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2)
    return blocks.reshape(*lead, h // 2, w // 2, 4)


def maxpool2(x) -> np.ndarray:
    """2x2 max-pooling with stride 2 over the last two axes.

    Leading axes (channels, batch) are preserved, so the same function pools
    feature tensors and activation maps.
    """
    return _pool_blocks(np.asarray(x)).max(axis=-1)


def maxpool2_argmax(x) -> tuple[np.ndarray, np.ndarray]:
    """Pooled values plus the winning index (0..3, row-major in the block).

    Ties go to the lowest index.
    """
    blocks = _pool_blocks(np.asarray(x))
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def unpool2(grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Route ``grad`` back through :func:`maxpool2_argmax` to the argmax cells."""
    lead = grad.shape[:-2]
    h, w = grad.shape[-2:]
    onehot = np.zeros((*lead, h, w, 4), dtype=grad.dtype)
    np.put_along_axis(onehot, idx[..., None], grad[..., None], axis=-1)
    out = onehot.reshape(*lead, h, w, 2, 2)
    out = np.moveaxis(out, -2, -3)
    return out.reshape(*lead, 2 * h, 2 * w)


def trigger_eval(features, params: TriggerParams) -> np.ndarray:
    """Per-region logistic trigger, returning a continuous activation map."""
    features = _as_tensor(features)
    if params.weights.shape[0] != features.shape[0]:
        raise ContractError(
            f"trigger has {params.weights.shape[0]} weights for {features.shape[0]} channels"
        )
    z = channel_sum(features, params.weights) + params.bias
    return logistic(z)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation of ``mask[..., H, W]`` by a square of side ``2*radius+1``."""
    if radius <= 0:
        return mask.copy()
    win = sliding_window_view(
        np.pad(mask, [(0, 0)] * (mask.ndim - 2) + [(radius, radius)] * 2),
        (2 * radius + 1,) * 2,
        axis=(-2, -1),
    )
    return win.any(axis=(-2, -1))


def upsample2(mask: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    return mask.repeat(2, axis=-2).repeat(2, axis=-1)
