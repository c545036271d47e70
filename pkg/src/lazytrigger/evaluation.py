"""Trigger quality and cost: calibration, working points, brightness baseline.

All rates are region-level: every cell of the final activation map is one
trial, pooled over the evaluated samples.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ContractError, maxpool2
from .dataset import Dataset
from .model import CnnTrigger, count_full_cost, lazy_forward_batch
from .train import forward_batch, model_costs


class UndefinedMetricError(ValueError):
    """A rate was requested over an empty set of regions."""


class CalibrationError(RuntimeError):
    def __init__(self, message: str, max_efficiency: float):
        super().__init__(f"{message} (max achievable efficiency {max_efficiency:.4f})")
        self.max_efficiency = max_efficiency


def signal_efficiency(predictions, truths) -> float:
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(truths).astype(bool)
    n = int(y.sum())
    if n == 0:
        raise UndefinedMetricError("no signal regions")
    return float((p & y).sum() / n)


def background_rejection(predictions, truths) -> float:
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(truths).astype(bool)
    n = int((~y).sum())
    if n == 0:
        raise UndefinedMetricError("no background regions")
    return float((~p & ~y).sum() / n)


# -- brightness-threshold baseline ---------------------------------------------


def _pool_n(x: np.ndarray, n: int) -> np.ndarray:
    for _ in range(n):
        x = maxpool2(x)
    return x


def baseline_threshold_trigger(image, brightness_threshold: float, n_cascades: int = 4) -> np.ndarray:
    """Binary map at final resolution: does any pixel in the region reach the threshold."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    f = 2**n_cascades
    if image.shape[0] % f or image.shape[1] % f:
        raise ContractError(f"image dims must be divisible by {f}")
    return _pool_n(image >= brightness_threshold, n_cascades)


def baseline_sweep(dataset: Dataset, n_points: int = 257) -> list[dict]:
    """Efficiency and rejection of the baseline over a threshold grid.

    The grid runs from 0 to just above the brightest region, with interior
    points at quantiles of the signal-region maxima. Rows are ordered by
    increasing threshold.
    """
    n = dataset.n_cascades
    region_max = _pool_n(dataset.images, n).ravel()
    y = dataset.levels[n].ravel().astype(bool)
    grid = np.quantile(region_max[y], np.linspace(0.0, 1.0, n_points)) if y.any() else np.array([])
    grid = np.unique(np.concatenate([[0.0], grid, [np.nextafter(region_max.max(), np.inf)]]))
    sig = np.sort(region_max[y])
    bkg = np.sort(region_max[~y])
    rows = []
    for t in grid:
        fired_sig = len(sig) - np.searchsorted(sig, t, side="left")
        fired_bkg = len(bkg) - np.searchsorted(bkg, t, side="left")
        rows.append(
            {
                "threshold": float(t),
                "signal_efficiency": float(fired_sig / len(sig)) if len(sig) else float("nan"),
                "background_rejection": float((len(bkg) - fired_bkg) / len(bkg)) if len(bkg) else float("nan"),
            }
        )
    return rows


def best_baseline_rejection(sweep: list[dict], min_efficiency: float) -> float:
    ok = [r["background_rejection"] for r in sweep if r["signal_efficiency"] >= min_efficiency]
    return max(ok) if ok else 0.0


# -- lazy evaluation over a dataset ----------------------------------------------


def lazy_eval(model: CnnTrigger, dataset: Dataset, thresholds=None, halo: str = "zero", chunk: int = 512) -> dict:
    """Run the lazy engine over ``dataset`` in chunks and stack the results."""
    t = model.thresholds if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    parts = []
    for s in range(0, len(dataset), chunk):
        out = lazy_forward_batch(model, dataset.images[s : s + chunk], t, halo)
        parts.append({k: out[k] for k in ("binary_maps", "intermediate_maps", "counts")})
    return {
        "binary_maps": [np.concatenate([p["binary_maps"][i] for p in parts]) for i in range(model.n + 1)],
        "intermediate_maps": [np.concatenate([p["intermediate_maps"][i] for p in parts]) for i in range(model.n)],
        "counts": np.concatenate([p["counts"] for p in parts]),
    }


def dense_intermediate_maps(model: CnnTrigger, dataset: Dataset, chunk: int = 512) -> list[np.ndarray]:
    parts = [forward_batch(model, dataset.images[s : s + chunk])["ahat"] for s in range(0, len(dataset), chunk)]
    return [np.concatenate([p[i] for p in parts]) for i in range(model.n)]


def _kth_largest(values: np.ndarray, k: int) -> float:
    return float(np.sort(values)[len(values) - k])


def _level_thresholds(ahat, y_final: np.ndarray, budget: float) -> np.ndarray:
    # each intermediate cut alone drops at most `budget` of final signal regions
    n = len(ahat)
    n_sig = int(y_final.sum())
    keep = int(np.ceil((1.0 - budget) * n_sig - 1e-9))
    t = np.zeros(n)
    for i in range(1, n):
        best = _pool_n(ahat[i - 1], n - i)[y_final]
        t[i - 1] = _kth_largest(best, keep) if keep > 0 else 0.0
    return t


def _gated_survival(ahat, y_final: np.ndarray, t: np.ndarray) -> float:
    # fraction of final signal regions with a live sub-region after all intermediate cuts
    live = np.ones(ahat[0].shape, dtype=bool)
    for i in range(len(ahat) - 1):
        live = maxpool2(live & (ahat[i] >= t[i]))
    return float(live[y_final].mean())


def calibrate_thresholds(
    model: CnnTrigger, dataset: Dataset, target_efficiency: float, halo: str = "zero", steps: int = 14
) -> np.ndarray:
    """Pick per-cascade thresholds reaching ``target_efficiency`` on ``dataset``.

    Every intermediate cascade gets the same efficiency budget ``b``: its
    threshold is the largest value that alone keeps a ``1 - b`` share of the
    final signal regions (judged by the best trigger output below each
    region). ``b`` is at most ``(1 - target) / (2 (n - 1))`` and is bisected
    below that when needed so that the gated pipeline keeps at least the
    target share of signal regions alive at the last cascade. The final threshold is then
    the largest value for which lazy evaluation reaches the target. If lazy
    evaluation loses more than the dense replay predicted, ``b`` is halved,
    and finally all intermediate thresholds drop to zero.
    """
    if not 0.0 < target_efficiency <= 1.0:
        raise ContractError("target_efficiency must lie in (0, 1]")
    n = model.n
    y_final = dataset.levels[n].astype(bool)
    n_sig = int(y_final.sum())
    if n_sig == 0:
        raise ContractError("calibration set has no signal regions")
    k_final = int(np.ceil(target_efficiency * n_sig - 1e-9))
    ahat = dense_intermediate_maps(model, dataset)
    need = k_final / n_sig

    def ok(b):
        return _gated_survival(ahat, y_final, _level_thresholds(ahat, y_final, b)) >= need

    budget = 0.0
    if n > 1:
        lo, hi = 0.0, (1.0 - target_efficiency) / (2 * (n - 1))
        if ok(hi):
            lo = hi
        else:
            for _ in range(steps):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if ok(mid) else (lo, mid)
        budget = lo
    best_eff = 0.0
    zero = False
    while True:
        t = np.zeros(n) if zero or n == 1 else _level_thresholds(ahat, y_final, budget)
        out = lazy_eval(model, dataset, t, halo)
        final = out["intermediate_maps"][n - 1][y_final]
        final = final[~np.isnan(final)]
        best_eff = max(best_eff, len(final) / n_sig)
        if len(final) >= k_final:
            t[n - 1] = _kth_largest(final, k_final) if k_final > 0 else 1.0
            return t
        if zero or n == 1:
            break
        if budget == 0.0:
            zero = True
        budget = budget / 2 if budget > 1e-6 else 0.0
    raise CalibrationError("target efficiency unreachable", best_eff)


def _weighted_cost(model: CnnTrigger, maps, levels, background_only: bool) -> tuple[float, float]:
    costs = model_costs(model)
    num = den = 0.0
    for i, c in enumerate(costs):
        w = (1.0 - levels[i]) if background_only else np.ones(levels[i].shape)
        num += c * float((w * maps[i]).sum())
        den += c * float(w.sum())
    return num, den


def normalized_complexity(model: CnnTrigger, thresholds, dataset: Dataset, halo: str = "zero", _lazy=None) -> dict:
    """Cost-weighted fraction of background computation actually performed.

    Returns ``C_hat`` from the per-region cost model on binary lazy maps,
    plus ``instrumented_ratio``: counted ops over the cost of a pass that
    rejects nothing (signal and background alike).
    """
    out = _lazy if _lazy is not None else lazy_eval(model, dataset, thresholds, halo)
    levels = [y.astype(np.float64) for y in dataset.levels]
    num, den = _weighted_cost(model, out["binary_maps"], levels, background_only=True)
    full = count_full_cost(model, dataset.images.shape[1:]).total * len(dataset)
    return {"C_hat": num / den if den else 0.0, "instrumented_ratio": float(out["counts"].sum() / full)}


def ops_per_pixel(model: CnnTrigger, thresholds, dataset: Dataset, halo: str = "zero", _lazy=None) -> float:
    out = _lazy if _lazy is not None else lazy_eval(model, dataset, thresholds, halo)
    levels = [y.astype(np.float64) for y in dataset.levels]
    num, _ = _weighted_cost(model, out["binary_maps"], levels, background_only=False)
    return num / dataset.images.size


@dataclass
class WorkingPoint:
    signal_efficiency: float
    background_rejection: float
    thresholds: list[float]
    measured_C_hat: float
    ops_per_pixel: float
    target_efficiency: float | None = None
    instrumented_ratio: float | None = None
    image_efficiency: float | None = None
    image_rejection: float | None = None


def evaluate(model: CnnTrigger, thresholds, dataset: Dataset, target=None, halo: str = "zero") -> WorkingPoint:
    thresholds = np.asarray(thresholds, dtype=np.float64)
    out = lazy_eval(model, dataset, thresholds, halo)
    n = model.n
    pred = out["binary_maps"][n]
    y = dataset.levels[n].astype(bool)
    cost = normalized_complexity(model, thresholds, dataset, _lazy=out)
    img_pred = pred.any(axis=(1, 2))
    img_y = y.any(axis=(1, 2))
    return WorkingPoint(
        signal_efficiency=signal_efficiency(pred, y),
        background_rejection=background_rejection(pred, y),
        thresholds=[float(v) for v in thresholds],
        measured_C_hat=cost["C_hat"],
        ops_per_pixel=ops_per_pixel(model, thresholds, dataset, _lazy=out),
        target_efficiency=target,
        instrumented_ratio=cost["instrumented_ratio"],
        image_efficiency=signal_efficiency(img_pred, img_y) if img_y.any() else None,
        image_rejection=background_rejection(img_pred, img_y) if (~img_y).any() else None,
    )


# -- reports -----------------------------------------------------------------------


@dataclass
class MetricsReport:
    model: str
    dataset: str
    n_regions_signal: int
    n_regions_background: int
    working_points: list[WorkingPoint] = field(default_factory=list)
    baseline: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["working_points"] = [asdict(w) for w in self.working_points]
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        cols = ["kind", "target_efficiency", "threshold", "signal_efficiency", "background_rejection", "C_hat", "ops_per_pixel"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for wp in self.working_points:
                w.writerow(
                    ["cnn", wp.target_efficiency, " ".join(repr(t) for t in wp.thresholds), wp.signal_efficiency,
                     wp.background_rejection, wp.measured_C_hat, wp.ops_per_pixel]
                )
            for r in self.baseline.get("sweep", []):
                w.writerow(["baseline", "", r["threshold"], r["signal_efficiency"], r["background_rejection"], "", ""])


def build_report(model: CnnTrigger, dataset: Dataset, targets, calibration: Dataset | None = None,
                 model_name: str = "", dataset_name: str = "", zero_thresholds: bool = False,
                 with_baseline: bool = True, halo: str = "zero") -> MetricsReport:
    """Calibrate on ``calibration`` (default: ``dataset``) and measure on ``dataset``."""
    n = model.n
    y = dataset.levels[n].astype(bool)
    report = MetricsReport(model_name, dataset_name, int(y.sum()), int((~y).sum()))
    if zero_thresholds:
        report.working_points.append(evaluate(model, np.zeros(n), dataset, None, halo))
    else:
        calib = calibration if calibration is not None else dataset
        for target in targets:
            t = calibrate_thresholds(model, calib, target, halo)
            report.working_points.append(evaluate(model, t, dataset, float(target), halo))
    if with_baseline:
        report.baseline = {"sweep": baseline_sweep(dataset)}
    return report


def write_pgm(path, values, binary: bool = False) -> None:
    """Write a 2-d map as an 8-bit binary PGM (P5), scaling [0, 1] to [0, 255]."""
    v = np.asarray(values, dtype=np.float64)
    if binary:
        pix = np.where(v > 0, 255, 0).astype(np.uint8)
    else:
        pix = np.rint(np.clip(np.nan_to_num(v), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)
