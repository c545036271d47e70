"""Command-line entry point: gen, train, eval and export-maps.

Every command writes into a run directory that also receives a
``manifest.json`` with package versions, seeds and sha256 digests of the
inputs. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig
from .core import ContractError, FormatError
from .dataset import generate_dataset, read_dataset, write_dataset
from .evaluation import CalibrationError, baseline_sweep, build_report, write_pgm
from .model import dense_forward, init_model, lazy_forward, load_model, save_model
from .train import TrainingError, train

log = logging.getLogger("lazytrigger")


class UsageError(Exception):
    """Bad flags, config or input files; maps to exit code 2."""


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return RunConfig.load(path)


def _read_data(path):
    if path is None or not Path(path).is_file():
        raise UsageError(f"dataset file not found: {path}")
    return read_dataset(path)


def _read_model(path):
    if path is None or not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def _write_manifest(run_dir: Path, key: str, args, inputs: dict, outputs: list, extra=None):
    """Merge this command's record into ``run_dir/manifest.json``."""
    path = run_dir / "manifest.json"
    manifest = {}
    if path.is_file():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except ValueError:
            manifest = {}
    manifest["versions"] = {
        "lazytrigger": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }
    record = {
        "command": args.command,
        "seed": args.seed,
        "config": str(args.config) if args.config else None,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p},
        "outputs": sorted(outputs),
    }
    if extra:
        record.update(extra)
    manifest.setdefault("runs", {})[key] = record
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _run_dir(out) -> Path:
    if out is None:
        raise UsageError("--out is required")
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- commands ---------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    dcfg = cfg.dataset
    if args.n_samples is not None:
        d = dcfg.to_dict()
        d["n_samples"] = args.n_samples
        dcfg = type(dcfg).from_dict(d)
    seed = 0 if args.seed is None else args.seed
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(dcfg, seed)
    write_dataset(ds, out)
    frac = float(ds.levels[0].any(axis=(1, 2)).mean())
    print(f"wrote {len(ds)} samples to {out} (signal fraction {frac:.4f})")
    args.seed = seed
    _write_manifest(out.parent, f"gen:{out.name}", args, {"config": args.config}, [out.name])
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    data = _read_data(args.data)
    run = _run_dir(args.out)
    opt = cfg.optimizer
    if args.seed is not None:
        opt = type(opt)(**{**opt.__dict__, "seed": args.seed})
    if args.epochs is not None:
        opt = type(opt)(**{**opt.__dict__, "epochs": args.epochs})
    if data.n_cascades < len(cfg.architecture):
        raise UsageError("dataset has fewer truth levels than the architecture has cascades")
    init = init_model(
        cfg.architecture,
        seed=opt.seed,
        input_mean=float(data.images.mean()),
        input_std=float(data.images.std()) or 1.0,
    )
    model, history = train(data, init, cfg.loss, opt)
    save_model(model, run / "model.json")
    history.write_csv(run / "train_log.csv")
    first, last = history.rows[0]["loss_final"], history.rows[-1]["loss_final"]
    print(f"trained {len(history.rows)} log rows; final-cascade loss {first:.5f} -> {last:.5f}")
    args.seed = opt.seed
    _write_manifest(run, "train", args, {"config": args.config, "data": args.data},
                    ["model.json", "train_log.csv"], {"run_config": cfg.to_dict()})
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    model = _read_model(args.model)
    data = _read_data(args.data)
    calib = _read_data(args.calibration) if args.calibration else None
    run = _run_dir(args.out)
    targets = args.targets or cfg.eval.targets
    halo = args.halo or cfg.eval.halo
    if calib is None and not args.zero_thresholds:
        # split the eval file: first part calibrates, the rest is measured
        k = int(round(cfg.eval.calibration_fraction * len(data)))
        if k < 1 or k >= len(data):
            raise UsageError("eval set too small to split for calibration")
        calib, data = data.subset(np.arange(k)), data.subset(np.arange(k, len(data)))
    report = build_report(
        model, data, targets, calibration=calib, model_name=Path(args.model).name,
        dataset_name=Path(args.data).name, zero_thresholds=args.zero_thresholds,
        with_baseline=True, halo=halo,
    )
    report.write_json(run / "metrics.json")
    report.write_csv(run / "metrics.csv")
    outputs = ["metrics.json", "metrics.csv"]
    if args.baseline_csv:
        path = run / "baseline_sweep.csv"
        rows = report.baseline["sweep"] or baseline_sweep(data)
        with open(path, "w") as f:
            f.write("threshold,signal_efficiency,background_rejection\n")
            for r in rows:
                f.write(f"{r['threshold']!r},{r['signal_efficiency']!r},{r['background_rejection']!r}\n")
        outputs.append(path.name)
    if args.save_models:
        for wp in report.working_points:
            name = "model_zero.json" if wp.target_efficiency is None else f"model_eff{wp.target_efficiency:g}.json"
            save_model(model.with_thresholds(wp.thresholds), run / name)
            outputs.append(name)
    for wp in report.working_points:
        tgt = "zero" if wp.target_efficiency is None else f"{wp.target_efficiency:.2f}"
        print(
            f"target {tgt}: efficiency {wp.signal_efficiency:.4f} rejection {wp.background_rejection:.4f} "
            f"C_hat {wp.measured_C_hat:.4f} ops/pixel {wp.ops_per_pixel:.3f}"
        )
    _write_manifest(run, "eval", args, {"config": args.config, "model": args.model, "data": args.data,
                                         "calibration": args.calibration}, outputs)
    return 0


def cmd_export_maps(args) -> int:
    model = _read_model(args.model)
    data = _read_data(args.data)
    run = _run_dir(args.out)
    if not 0 <= args.index < len(data):
        raise UsageError(f"sample index {args.index} out of range [0, {len(data)})")
    if args.thresholds is not None:
        if len(args.thresholds) != model.n:
            raise UsageError(f"expected {model.n} thresholds")
        model = model.with_thresholds(args.thresholds)
    sample = data[args.index]
    dense = dense_forward(model, sample.image)
    lazy = lazy_forward(model, sample.image, halo=args.halo)
    outputs = []
    for i in range(1, model.n + 1):
        for kind, values, binary in (("dense", dense.activation_maps[i], False), ("binary", lazy.binary_maps[i], True)):
            name = f"sample{args.index}_{kind}_A{i}.pgm"
            write_pgm(run / name, values, binary=binary)
            outputs.append(name)
    name = f"sample{args.index}_truth.pgm"
    write_pgm(run / name, sample.truth, binary=True)
    outputs.append(name)
    print(f"wrote {len(outputs)} maps to {run}")
    _write_manifest(run, f"export-maps:{args.index}", args, {"model": args.model, "data": args.data}, outputs)
    return 0


# -- argument parsing ---------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="64-bit seed")
    p.add_argument("--out", help="output file (gen) or run directory")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="cap on numeric threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lazytrigger", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n-samples", type=int, help="override dataset.n_samples")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset file")
    _common(p)
    p.add_argument("--data", required=True, help="LCT1 dataset file")
    p.add_argument("--epochs", type=int, help="override optimizer.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="calibrate thresholds and write a metrics report")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="held-out dataset")
    p.add_argument("--calibration", help="calibration dataset (default: split --data)")
    p.add_argument("--targets", type=float, nargs="+", help="signal efficiency targets")
    p.add_argument("--halo", choices=("zero", "full"))
    p.add_argument("--zero-thresholds", action="store_true", help="evaluate with all thresholds 0")
    p.add_argument("--baseline-csv", action="store_true", help="also write baseline_sweep.csv")
    p.add_argument("--save-models", action="store_true", help="save one checkpoint per working point")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-maps", help="write activation maps of one sample as PGM images")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0, help="sample index")
    p.add_argument("--thresholds", type=float, nargs="+", help="override model thresholds")
    p.add_argument("--halo", choices=("zero", "full"), default="zero")
    p.set_defaults(func=cmd_export_maps)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, CalibrationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
