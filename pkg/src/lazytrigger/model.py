"""The cascade network: dense (differentiable) and lazy (gated) forward passes.

A network of ``n`` cascades maps an ``H x W`` image to activation maps
``A^0 .. A^n`` where ``A^i`` has shape ``(H / 2**i, W / 2**i)``. Cascade
``i`` convolves ``I^{i-1}``, applies ReLU (all cascades but the first),
max-pools 2x2 and evaluates its logistic trigger on the pooled features.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    ContractError,
    ConvSpec,
    FormatError,
    TriggerParams,
    channel_sum,
    conv2d,
    conv_windows,
    dilate,
    kernel_sum,
    logistic,
    maxpool2,
    relu,
    trigger_eval,
    upsample2,
)

#: ``(filters, kernel_size)`` per cascade: one 1x1 filter, then 1, 3, 6 filters of 3x3.
REFERENCE_ARCHITECTURE = [(1, 1), (1, 3), (3, 3), (6, 3)]

CHECKPOINT_VERSION = 1
HALO_MODES = ("zero", "full")


@dataclass
class Cascade:
    conv: ConvSpec
    trigger: TriggerParams


@dataclass
class CnnTrigger:
    cascades: list[Cascade]
    thresholds: np.ndarray = None

    def __post_init__(self):
        if not self.cascades:
            raise ContractError("a trigger needs at least one cascade")
        if self.cascades[0].conv.m != 1:
            raise ContractError("the first cascade must take a single-channel image")
        for i, (a, b) in enumerate(zip(self.cascades, self.cascades[1:]), start=2):
            if b.conv.m != a.conv.l:
                raise ContractError(f"cascade {i} expects {b.conv.m} channels, previous emits {a.conv.l}")
        for i, c in enumerate(self.cascades, start=1):
            if c.trigger.weights.shape[0] != c.conv.l:
                raise ContractError(f"cascade {i} trigger has wrong number of weights")
        if self.thresholds is None:
            self.thresholds = np.zeros(self.n)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64).reshape(-1)
        if self.thresholds.shape != (self.n,):
            raise ContractError(f"need {self.n} thresholds, got {self.thresholds.shape}")
        if np.any(self.thresholds < 0) or np.any(self.thresholds > 1):
            raise ContractError("thresholds must lie in [0, 1]")

    @property
    def n(self) -> int:
        return len(self.cascades)

    @staticmethod
    def has_relu(i: int) -> bool:
        """Whether cascade ``i`` (1-based) applies ReLU after its convolution.

        The first cascade stays linear so that its trigger is a monotone
        function of pixel brightness.
        """
        return i > 1

    def with_thresholds(self, thresholds) -> "CnnTrigger":
        return CnnTrigger(self.cascades, np.array(thresholds, dtype=np.float64))

    def check_image_dims(self, h: int, w: int):
        f = 2**self.n
        if h % f or w % f:
            raise ContractError(f"image dims {h}x{w} must be divisible by {f}")


def init_model(architecture=REFERENCE_ARCHITECTURE, seed: int = 0, input_mean: float = 0.0,
               input_std: float = 1.0) -> CnnTrigger:
    """He-initialised kernels, zero biases, small random trigger weights.

    ``input_mean`` and ``input_std`` describe the pixel distribution; the
    first cascade is initialised to standardise it so later cascades see
    unit-scale features.
    """
    rng = np.random.default_rng(seed)
    cascades = []
    m = 1
    for l, k in architecture:  # noqa: E741
        kernels = rng.normal(0.0, np.sqrt(2.0 / (m * k * k)), size=(l, m, k, k))
        biases = np.zeros(l)
        if not cascades:
            kernels = np.abs(kernels) / input_std
            biases = -input_mean * kernels.sum(axis=(1, 2, 3))
        cascades.append(
            Cascade(
                ConvSpec(kernels, biases),
                TriggerParams(rng.normal(0.0, 1.0 / np.sqrt(l), size=l), 0.0),
            )
        )
        m = l
    return CnnTrigger(cascades)


# -- dense, differentiable regime ------------------------------------------


@dataclass
class DenseTrace:
    features: list[np.ndarray]  # I^1..I^n
    intermediate_maps: list[np.ndarray]  # Â^1..Â^n
    activation_maps: list[np.ndarray]  # A^0..A^n


def _as_image(model: CnnTrigger, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] != 1:
        raise ContractError(f"expected a single-channel image, got shape {image.shape}")
    model.check_image_dims(*image.shape[1:])
    return image


def dense_forward(model: CnnTrigger, image) -> DenseTrace:
    x = _as_image(model, image)
    a = np.ones(x.shape[1:])
    trace = DenseTrace([], [], [a])
    for i, c in enumerate(model.cascades, start=1):
        y = conv2d(x, c.conv)
        if model.has_relu(i):
            y = relu(y)
        x = maxpool2(y)
        ahat = trigger_eval(x, c.trigger)
        a = ahat * maxpool2(a)
        trace.features.append(x)
        trace.intermediate_maps.append(ahat)
        trace.activation_maps.append(a)
    return trace


def dense_replay(model: CnnTrigger, trace: DenseTrace, thresholds=None) -> list[np.ndarray]:
    """Binary maps obtained by thresholding each cascade of a dense trace.

    ``B^i = (Â^i >= t_i) AND maxpool2(B^{i-1})`` with ``B^0 = 1``: what the
    lazy engine produces when every feature it reads is exact.
    """
    t = model.thresholds if thresholds is None else np.asarray(thresholds)
    b = np.ones(trace.activation_maps[0].shape, dtype=bool)
    out = [b]
    for i, ahat in enumerate(trace.intermediate_maps):
        b = (ahat >= t[i]) & maxpool2(b)
        out.append(b)
    return out


# -- lazy, gated regime --------------------------------------------------------


@dataclass
class OpCounter:
    """Arithmetic tally; ``per_cascade[i] = (multiplications, additions, trigger_ops)``.

    Counting follows the per-operation taxonomy of the cost model: a conv
    output costs ``m*l*k*k`` multiplications and ``l*(m*k*k - 1)`` additions;
    a trigger evaluation costs ``2*l - 1`` operations. Bias additions,
    ReLU, pooling comparisons and the logistic itself are not counted.
    """

    per_cascade: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "OpCounter":
        return cls(np.zeros((n, 3), dtype=np.int64))

    @property
    def multiplications(self) -> int:
        return int(self.per_cascade[:, 0].sum())

    @property
    def additions(self) -> int:
        return int(self.per_cascade[:, 1].sum())

    @property
    def trigger_ops(self) -> int:
        return int(self.per_cascade[:, 2].sum())

    @property
    def total(self) -> int:
        return int(self.per_cascade.sum())

    def __add__(self, other: "OpCounter") -> "OpCounter":
        return OpCounter(self.per_cascade + other.per_cascade)

    def __eq__(self, other) -> bool:
        return isinstance(other, OpCounter) and np.array_equal(self.per_cascade, other.per_cascade)


@dataclass
class LazyTrace:
    binary_maps: list[np.ndarray]  # A^0..A^n, bool
    intermediate_maps: list[np.ndarray]  # Â^1..Â^n, NaN where the trigger was skipped
    features: list[np.ndarray]  # I^1..I^n, zero where never computed
    computed_masks: list[np.ndarray]  # which positions of I^1..I^n were evaluated
    exact_masks: list[np.ndarray]  # computed from exact inputs only
    trusted_maps: list[np.ndarray]  # A^0..A^n: decision equals the dense replay
    op_counter: OpCounter = field(default_factory=lambda: OpCounter.zeros(0))


def _conv_costs(conv: ConvSpec) -> tuple[int, int, int]:
    m, l, k = conv.m, conv.l, conv.k  # noqa: E741
    return m * l * k * k, l * (m * k * k - 1), 2 * l - 1


_CHILD_DY = np.array([0, 0, 1, 1])
_CHILD_DX = np.array([0, 1, 0, 1])


def lazy_forward_batch(model: CnnTrigger, images, thresholds=None, halo: str = "zero") -> dict:
    """Lazy evaluation over a stack of images ``(B, H, W)``.

    Positions are gathered across the whole stack, so results per image are
    identical to running :func:`lazy_forward` one image at a time. Returns a
    dict of stacked arrays; ``counts`` is ``(B, n, 3)``.

    ``halo`` controls what a convolution reads outside the computed area:
    ``"zero"`` computes the kernel-radius halo once and reads zeros beyond
    it; ``"full"`` recursively computes every input a requested feature
    depends on, which makes every lazy decision equal the dense replay.
    """
    if halo not in HALO_MODES:
        raise ContractError(f"halo must be one of {HALO_MODES}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ContractError("expected a (B, H, W) image stack")
    B, H, W = images.shape
    model.check_image_dims(H, W)
    t = model.thresholds if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    n = model.n

    feats = [images[:, None]]
    computed = [np.ones((B, H, W), dtype=bool)]
    exact = [np.ones((B, H, W), dtype=bool)]
    for i, c in enumerate(model.cascades, start=1):
        shape = (B, H >> i, W >> i)
        feats.append(np.zeros((B, c.conv.l, *shape[1:])))
        computed.append(np.zeros(shape, dtype=bool))
        exact.append(np.zeros(shape, dtype=bool))
    counts = np.zeros((B, n, 3), dtype=np.int64)

    def ensure(i: int, need: np.ndarray):
        new = need & ~computed[i]
        if not new.any():
            return
        conv = model.cascades[i - 1].conv
        if halo == "full" and i > 1:
            ensure(i - 1, dilate(upsample2(new), conv.radius))
        b, y, x = np.nonzero(new)
        cy = 2 * y[:, None] + _CHILD_DY
        cx = 2 * x[:, None] + _CHILD_DX
        patches = conv_windows(feats[i - 1], conv.k)[b[:, None], :, cy, cx]  # (P, 4, m, k, k)
        out = kernel_sum(patches, conv.kernels) + conv.biases
        if model.has_relu(i):
            out = np.maximum(out, 0.0)
        feats[i][b, :, y, x] = out.max(axis=1)
        r = conv.radius
        ex = np.pad(exact[i - 1], ((0, 0), (r, r), (r, r)), constant_values=True)
        ex = sliding_window_view(ex, (conv.k, conv.k), axis=(1, 2)).all(axis=(-2, -1))
        exact[i][b, y, x] = ex[b[:, None], cy, cx].all(axis=1)
        computed[i] |= new
        mul, add, _ = _conv_costs(conv)
        per_image = np.bincount(b, minlength=B)
        counts[:, i - 1, 0] += 4 * mul * per_image
        counts[:, i - 1, 1] += 4 * add * per_image

    binary = [np.ones((B, H, W), dtype=bool)]
    trusted = [np.ones((B, H, W), dtype=bool)]
    ahats = []
    for i, c in enumerate(model.cascades, start=1):
        live = maxpool2(binary[-1])
        if i > 1:
            ensure(i - 1, dilate(upsample2(live), c.conv.radius))
        ensure(i, live)
        b, y, x = np.nonzero(live)
        ahat = np.full(live.shape, np.nan)
        z = channel_sum(feats[i][b, :, y, x], c.trigger.weights, axis=1) + c.trigger.bias
        ahat[b, y, x] = logistic(z)
        counts[:, i - 1, 2] += _conv_costs(c.conv)[2] * np.bincount(b, minlength=B)
        a = np.zeros(live.shape, dtype=bool)
        a[b, y, x] = ahat[b, y, x] >= t[i - 1]
        binary.append(a)
        ahats.append(ahat)
        trusted.append(~maxpool2(~trusted[-1]) & (~live | exact[i]))

    return {
        "binary_maps": binary,
        "intermediate_maps": ahats,
        "features": feats[1:],
        "computed_masks": computed[1:],
        "exact_masks": exact[1:],
        "trusted_maps": trusted,
        "counts": counts,
    }


def lazy_forward(model: CnnTrigger, image, thresholds=None, halo: str = "zero") -> LazyTrace:
    """Gated inference: convolution work is skipped in rejected regions.

    A region of ``A^i`` is live when any of its four sub-regions in
    ``A^{i-1}`` is active. Features are computed at live regions and at the
    kernel-radius halo the next convolution needs; the trigger runs on live
    regions only and ``A^i = live AND (Â^i >= threshold_i)``.
    """
    x = _as_image(model, image)
    out = lazy_forward_batch(model, x, thresholds, halo)
    return LazyTrace(
        binary_maps=[m[0] for m in out["binary_maps"]],
        intermediate_maps=[m[0] for m in out["intermediate_maps"]],
        features=[f[0] for f in out["features"]],
        computed_masks=[m[0] for m in out["computed_masks"]],
        exact_masks=[m[0] for m in out["exact_masks"]],
        trusted_maps=[m[0] for m in out["trusted_maps"]],
        op_counter=OpCounter(out["counts"][0]),
    )


def count_full_cost(model: CnnTrigger, image_dims) -> OpCounter:
    """Closed-form op count of a lazy pass that rejects nothing."""
    h, w = image_dims
    model.check_image_dims(h, w)
    per = np.zeros((model.n, 3), dtype=np.int64)
    for i, c in enumerate(model.cascades, start=1):
        mul, add, trig = _conv_costs(c.conv)
        n_in = (h >> (i - 1)) * (w >> (i - 1))
        per[i - 1] = (n_in * mul, n_in * add, (n_in // 4) * trig)
    return OpCounter(per)


# -- checkpoints ---------------------------------------------------------------


def model_to_dict(model: CnnTrigger) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "cascades": [
            {
                "m": c.conv.m,
                "l": c.conv.l,
                "k": c.conv.k,
                "kernels": c.conv.kernels.tolist(),
                "biases": c.conv.biases.tolist(),
                "trigger_weights": c.trigger.weights.tolist(),
                "trigger_bias": c.trigger.bias,
            }
            for c in model.cascades
        ],
        "thresholds": model.thresholds.tolist(),
    }


def model_from_dict(d: dict) -> CnnTrigger:
    if not isinstance(d, dict) or d.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {d.get('version') if isinstance(d, dict) else d!r}")
    try:
        cascades = []
        for c in d["cascades"]:
            kernels = np.array(c["kernels"], dtype=np.float64)
            if kernels.shape != (c["l"], c["m"], c["k"], c["k"]):
                raise FormatError(f"kernel shape {kernels.shape} does not match m, l, k")
            cascades.append(
                Cascade(ConvSpec(kernels, c["biases"]), TriggerParams(c["trigger_weights"], c["trigger_bias"]))
            )
        return CnnTrigger(cascades, d["thresholds"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed checkpoint: {exc}") from exc


def save_model(model: CnnTrigger, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> CnnTrigger:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    return model_from_dict(d)
