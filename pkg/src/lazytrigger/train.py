"""Losses, exact gradients and the optimisation loop.

The forward and backward passes here run on image stacks ``(B, H, W)``
with hand-written reverse-mode rules for every layer. They compute the
same quantities as :func:`lazytrigger.model.dense_forward`; the test suite
cross-checks both paths and checks gradients against finite differences.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ContractError, ConvSpec, channel_sum, conv_windows, kernel_sum, logistic, maxpool2_argmax, unpool2
from .dataset import Dataset
from .model import Cascade, CnnTrigger, DenseTrace, TriggerParams

log = logging.getLogger(__name__)

EPS = 1e-12
MODES = ("beta-penalty", "dsn")


class TrainingError(RuntimeError):
    """Raised on a non-finite loss. ``model`` holds the last finite parameters."""

    def __init__(self, message: str, model: CnnTrigger | None = None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


def per_cascade_cost(spec: ConvSpec, first: bool = False) -> float:
    """Naive per-region cost of one cascade: multiplications, summations, trigger.

    The first cascade is a plain brightness cut and costs 1 by convention.
    """
    if first:
        return 1.0
    m, l, k = spec.m, spec.l, spec.k  # noqa: E741
    return float(m * l * k * k + l * (m * k * k - 1) + 2 * l - 1)


def model_costs(model: CnnTrigger, overrides=None) -> np.ndarray:
    if overrides is not None:
        costs = np.asarray(overrides, dtype=np.float64)
        if costs.shape != (model.n,):
            raise ContractError(f"need {model.n} cost overrides")
        return costs
    return np.array([per_cascade_cost(c.conv, first=(i == 0)) for i, c in enumerate(model.cascades)])


@dataclass
class LossConfig:
    gamma: float = 1.0
    beta: float = 1e-5
    alphas: list[float] | None = None  # default: proportional to the cascade costs
    mode: str = "dsn"
    cost_overrides: list[float] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.gamma > 0:
            raise ContractError("gamma must be positive")
        if self.beta < 0:
            raise ContractError("beta must be non-negative")
        if self.alphas is not None and any(a < 0 for a in self.alphas):
            raise ContractError("alphas must be non-negative")

    def costs(self, model: CnnTrigger) -> np.ndarray:
        return model_costs(model, self.cost_overrides)

    def resolved_alphas(self, model: CnnTrigger) -> np.ndarray:
        if self.alphas is not None:
            a = np.asarray(self.alphas, dtype=np.float64)
            if a.shape != (model.n - 1,):
                raise ContractError(f"need {model.n - 1} alphas, got {a.shape}")
            return a
        c = self.costs(model)[: model.n - 1]
        return c / c.sum() if c.sum() > 0 else c


# -- losses on single maps -----------------------------------------------------


def _check_dims(a, y):
    if np.shape(a) != np.shape(y):
        raise ContractError(f"map dims {np.shape(a)} and truth dims {np.shape(y)} differ")


def cascade_loss(a, y, gamma: float = 1.0) -> float:
    """Weighted cross-entropy between an activation map and a truth map."""
    _check_dims(a, y)
    a = np.clip(np.asarray(a, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(a) + gamma * (1.0 - y) * np.log(1.0 - a)))


def complexity_penalty(trace: DenseTrace, truth_pyramid, costs) -> float:
    """Cost-weighted activation mass on background regions.

    ``truth_pyramid`` holds Y^0..Y^n (at least Y^0..Y^{n-1}).
    """
    maps = trace.activation_maps
    total = 0.0
    for i, c in enumerate(costs, start=1):
        _check_dims(maps[i - 1], truth_pyramid[i - 1])
        total += c * float(np.sum((1.0 - np.asarray(truth_pyramid[i - 1], dtype=np.float64)) * maps[i - 1]))
    return total


def complexity_norm(truth_pyramid, costs) -> float:
    """Denominator of the normalised complexity: full cost on background regions."""
    return float(sum(c * np.sum(1.0 - np.asarray(truth_pyramid[i], dtype=np.float64)) for i, c in enumerate(costs)))


def total_loss(trace: DenseTrace, truth_pyramid, cfg: LossConfig, model: CnnTrigger) -> float:
    n = len(trace.activation_maps) - 1
    final = cascade_loss(trace.activation_maps[n], truth_pyramid[n], cfg.gamma)
    if cfg.mode == "beta-penalty":
        return final + cfg.beta * complexity_penalty(trace, truth_pyramid, cfg.costs(model))
    alphas = cfg.resolved_alphas(model)
    return final + sum(
        alphas[i - 1] * cascade_loss(trace.activation_maps[i], truth_pyramid[i], cfg.gamma) for i in range(1, n)
    )


# -- batched forward / backward ------------------------------------------------


@dataclass
class Gradients:
    """Per-cascade gradients, shaped like the model parameters."""

    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    trigger_weights: list[np.ndarray]
    trigger_bias: list[float]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for i in range(len(self.kernels)):
            out += [self.kernels[i], self.biases[i], self.trigger_weights[i], np.asarray(self.trigger_bias[i])]
        return out


def model_arrays(model: CnnTrigger) -> list[np.ndarray]:
    out = []
    for c in model.cascades:
        out += [c.conv.kernels, c.conv.biases, c.trigger.weights, np.asarray(c.trigger.bias)]
    return out


def model_from_arrays(arrays, thresholds=None) -> CnnTrigger:
    cascades = []
    for j in range(0, len(arrays), 4):
        k, b, w, tb = arrays[j : j + 4]
        cascades.append(Cascade(ConvSpec(k.copy(), b.copy()), TriggerParams(w.copy(), float(tb))))
    return CnnTrigger(cascades, thresholds)


def forward_batch(model: CnnTrigger, images: np.ndarray) -> dict:
    """Dense forward over ``(B, H, W)`` keeping what the backward pass needs."""
    images = np.asarray(images, dtype=np.float64)
    model.check_image_dims(*images.shape[1:])
    x = images[:, None]
    a = np.ones(images.shape)
    cache = {"inputs": [], "pre": [], "pool_idx": [], "features": [], "ahat": [], "gate": [], "gate_idx": [], "A": [a]}
    for i, c in enumerate(model.cascades, start=1):
        cache["inputs"].append(x)
        windows = np.moveaxis(conv_windows(x, c.conv.k), 1, 3)  # (b, h, w, m, k, k)
        y = np.moveaxis(kernel_sum(windows, c.conv.kernels), -1, 1) + c.conv.biases[:, None, None]
        cache["pre"].append(y)
        if model.has_relu(i):
            y = np.maximum(y, 0.0)
        x, idx = maxpool2_argmax(y)
        ahat = logistic(channel_sum(x, c.trigger.weights, axis=1) + c.trigger.bias)
        gate, gidx = maxpool2_argmax(a)
        a = ahat * gate
        cache["pool_idx"].append(idx)
        cache["features"].append(x)
        cache["ahat"].append(ahat)
        cache["gate"].append(gate)
        cache["gate_idx"].append(gidx)
        cache["A"].append(a)
    return cache


def _ce_terms(a, y, gamma):
    """Per-sample cross-entropy and its gradient w.r.t. ``a``."""
    ac = np.clip(a, EPS, 1.0 - EPS)
    norm = a.shape[-1] * a.shape[-2]
    loss = -(y * np.log(ac) + gamma * (1.0 - y) * np.log(1.0 - ac)).sum(axis=(-2, -1)) / norm
    inside = (a > EPS) & (a < 1.0 - EPS)
    grad = -(y / ac - gamma * (1.0 - y) / (1.0 - ac)) / norm * inside
    return loss, grad


def loss_batch(model: CnnTrigger, cache: dict, levels, cfg: LossConfig) -> tuple[dict, list[np.ndarray]]:
    """Per-sample loss terms and d(mean total loss)/dA^i for i = 0..n.

    ``levels[i]`` is the truth stack Y^i of shape ``(B, H/2**i, W/2**i)``.
    """
    n = model.n
    A = cache["A"]
    B = A[0].shape[0]
    costs = cfg.costs(model)
    alphas = cfg.resolved_alphas(model)
    ys = [np.asarray(levels[i], dtype=np.float64) for i in range(n + 1)]
    gA = [np.zeros_like(a) for a in A]

    ce, grads = zip(*(_ce_terms(A[i], ys[i], cfg.gamma) for i in range(1, n + 1)))
    penalty = sum(c * ((1.0 - ys[i]) * A[i]).sum(axis=(-2, -1)) for i, c in enumerate(costs))
    norm = sum(c * (1.0 - ys[i]).sum(axis=(-2, -1)) for i, c in enumerate(costs))

    gA[n] += grads[n - 1] / B
    if cfg.mode == "beta-penalty":
        total = ce[n - 1] + cfg.beta * penalty
        for i, c in enumerate(costs):
            gA[i] += cfg.beta * c * (1.0 - ys[i]) / B
    else:
        total = ce[n - 1] + sum(alphas[i - 1] * ce[i - 1] for i in range(1, n))
        for i in range(1, n):
            gA[i] += alphas[i - 1] * grads[i - 1] / B
    terms = {
        "total": total,
        "final": ce[n - 1],
        "companion": np.stack(ce[: n - 1], axis=-1) if n > 1 else np.zeros((B, 0)),
        "penalty": penalty,
        "norm": norm,
    }
    return terms, gA


def backward_batch(model: CnnTrigger, cache: dict, gA: list[np.ndarray]) -> Gradients:
    n = model.n
    gA = [g.copy() for g in gA]
    grads = Gradients([None] * n, [None] * n, [None] * n, [0.0] * n)
    g_feat = None  # gradient w.r.t. I^i coming from cascade i+1
    for i in range(n, 0, -1):
        c = model.cascades[i - 1]
        ahat, gate = cache["ahat"][i - 1], cache["gate"][i - 1]
        g_ahat = gA[i] * gate
        if i > 1:
            gA[i - 1] += unpool2(gA[i] * ahat, cache["gate_idx"][i - 1])
        gz = g_ahat * ahat * (1.0 - ahat)
        feats = cache["features"][i - 1]
        grads.trigger_weights[i - 1] = np.einsum("bhw,bchw->c", gz, feats)
        grads.trigger_bias[i - 1] = float(gz.sum())
        gx = c.trigger.weights[None, :, None, None] * gz[:, None]
        if g_feat is not None:
            gx = gx + g_feat
        gy = unpool2(gx, cache["pool_idx"][i - 1])
        if model.has_relu(i):
            gy = gy * (cache["pre"][i - 1] > 0)
        x_in = cache["inputs"][i - 1]
        k = c.conv.k
        grads.kernels[i - 1] = np.einsum("bfhw,bchwij->fcij", gy, conv_windows(x_in, k))
        grads.biases[i - 1] = gy.sum(axis=(0, 2, 3))
        if i > 1:
            g_feat = np.einsum("bfhwij,fcij->bchw", conv_windows(gy, k), c.conv.kernels[:, :, ::-1, ::-1])
    return grads


def backward(model: CnnTrigger, image, truth_pyramid, cfg: LossConfig) -> tuple[float, Gradients]:
    """Loss and exact parameter gradients for one sample."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    cache = forward_batch(model, image[None])
    levels = [np.asarray(y)[None] for y in truth_pyramid]
    terms, gA = loss_batch(model, cache, levels, cfg)
    loss = float(terms["total"][0])
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    return loss, backward_batch(model, cache, gA)


# -- optimisation loop ---------------------------------------------------------


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    log_every: int = 0  # rows every N steps; 0 logs once per epoch

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ContractError("invalid optimizer configuration")


class Adam:
    def __init__(self, params: list[np.ndarray], cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        c = self.cfg
        self.t += 1
        out = []
        for j, (p, g) in enumerate(zip(params, grads)):
            self.m[j] = c.beta1 * self.m[j] + (1 - c.beta1) * g
            self.v[j] = c.beta2 * self.v[j] + (1 - c.beta2) * g * g
            mhat = self.m[j] / (1 - c.beta1**self.t)
            vhat = self.v[j] / (1 - c.beta2**self.t)
            out.append(p - c.lr * mhat / (np.sqrt(vhat) + c.eps))
        return out


@dataclass
class TrainingLog:
    n_cascades: int
    rows: list[dict] = field(default_factory=list)

    def header(self) -> list[str]:
        comp = [f"loss_companion_{i}" for i in range(1, self.n_cascades)]
        return ["epoch", "step", "loss_total", "loss_final", *comp, "penalty_C", "C_hat"]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.header())
            for r in self.rows:
                w.writerow([r[h] if isinstance(r[h], int) else repr(float(r[h])) for h in self.header()])


class _Accumulator:
    def __init__(self, n: int):
        self.n = n
        self.reset()

    def reset(self):
        self.count = 0
        self.sums = {"loss_total": 0.0, "loss_final": 0.0, "penalty_C": 0.0}
        self.companion = np.zeros(self.n - 1)
        self.c_num = 0.0
        self.c_den = 0.0
        self.bg_num = np.zeros(self.n)
        self.bg_den = np.zeros(self.n)

    def add(self, terms: dict, cache: dict, levels):
        self.count += terms["total"].shape[0]
        self.sums["loss_total"] += terms["total"].sum()
        self.sums["loss_final"] += terms["final"].sum()
        self.sums["penalty_C"] += terms["penalty"].sum()
        self.companion += terms["companion"].sum(axis=0)
        self.c_num += terms["penalty"].sum()
        self.c_den += terms["norm"].sum()
        for i in range(1, self.n + 1):
            bg = 1.0 - levels[i]
            self.bg_num[i - 1] += (bg * cache["A"][i]).sum()
            self.bg_den[i - 1] += bg.sum()

    def row(self, epoch: int, step: int) -> dict:
        r = {"epoch": epoch, "step": step}
        for k, v in self.sums.items():
            r[k] = v / self.count
        for i, v in enumerate(self.companion, start=1):
            r[f"loss_companion_{i}"] = v / self.count
        r["C_hat"] = self.c_num / self.c_den if self.c_den else 0.0
        for i in range(self.n):
            r[f"bg_activation_{i + 1}"] = self.bg_num[i] / max(self.bg_den[i], 1.0)
        return r


def train(
    dataset: Dataset,
    model_init: CnnTrigger,
    cfg: LossConfig,
    opt: OptimizerConfig,
    callback=None,
) -> tuple[CnnTrigger, TrainingLog]:
    """Minibatch Adam on the mean per-sample total loss.

    Log rows average the loss terms over the steps since the previous row.
    Batches are drawn from a permutation seeded by ``opt.seed``, so the
    result is a pure function of ``(dataset, model_init, cfg, opt)``.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if dataset.n_cascades < model_init.n:
        raise ContractError("dataset truth pyramid is shallower than the model")
    rng = np.random.default_rng(opt.seed)
    params = [np.array(p, dtype=np.float64) for p in model_arrays(model_init)]
    thresholds = model_init.thresholds
    adam = Adam(params, opt)
    history = TrainingLog(model_init.n)
    acc = _Accumulator(model_init.n)
    model = model_from_arrays(params, thresholds)
    step = 0
    N = len(dataset)
    for epoch in range(1, opt.epochs + 1):
        order = rng.permutation(N)
        for start in range(0, N, opt.batch_size):
            idx = np.sort(order[start : start + opt.batch_size])
            levels = [y[idx].astype(np.float64) for y in dataset.levels]
            cache = forward_batch(model, dataset.images[idx])
            terms, gA = loss_batch(model, cache, levels, cfg)
            if not np.all(np.isfinite(terms["total"])):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}", model, history)
            grads = backward_batch(model, cache, gA).arrays()
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite gradient at epoch {epoch}, step {step}", model, history)
            acc.add(terms, cache, levels)
            params = adam.step(params, grads)
            model = model_from_arrays(params, thresholds)
            step += 1
            if opt.log_every and step % opt.log_every == 0:
                history.rows.append(acc.row(epoch, step))
                acc.reset()
        if acc.count:
            history.rows.append(acc.row(epoch, step))
            acc.reset()
        if history.rows:
            r = history.rows[-1]
            log.info("epoch %d: loss %.5f final %.5f C_hat %.4f", epoch, r["loss_total"], r["loss_final"], r["C_hat"])
        if callback is not None:
            callback(epoch, model, history)
    return model, history
