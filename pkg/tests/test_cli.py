import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lazytrigger.cli import main
from lazytrigger.config import EvalConfig, RunConfig
from lazytrigger.core import ContractError
from lazytrigger.dataset import DatasetConfig, read_dataset
from lazytrigger.evaluation import read_pgm

SMALL = {
    "dataset": {"n_samples": 60, "image_size": 32, "track_length_range": [6, 20], "track_width": 2},
    "loss": {"gamma": 0.5},
    "optimizer": {"epochs": 2, "lr": 0.01, "batch_size": 16},
    "eval": {"targets": [0.9, 0.95, 0.99]},
}


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


@pytest.fixture
def pipeline(tmp_path, cfg):
    run = tmp_path / "run"
    assert main(["gen", "--config", cfg, "--seed", "7", "--out", str(run / "train.lct")]) == 0
    assert main(["gen", "--config", cfg, "--seed", "8", "--out", str(run / "test.lct")]) == 0
    assert main(["train", "--config", cfg, "--data", str(run / "train.lct"), "--out", str(run)]) == 0
    return run


# -- config ------------------------------------------------------------------------


def test_run_config_defaults():
    c = RunConfig()
    assert c.architecture == [(1, 1), (1, 3), (3, 3), (6, 3)]
    assert c.eval.targets == [0.90, 0.95, 0.99]
    assert RunConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize(
    "d",
    [
        {"bogus": 1},
        {"dataset": {"bogus": 1}},
        {"loss": {"mode": "other"}},
        {"architecture": [[1, 2]]},
        {"architecture": [[1, 1], [1, 3]], "dataset": {"n_cascades": 4}},
        {"eval": {"targets": [1.5]}},
        {"eval": {"halo": "wide"}},
        {"optimizer": "fast"},
    ],
)
def test_run_config_rejects(d):
    with pytest.raises(ContractError):
        RunConfig.from_dict(d)


def test_architecture_sets_cascade_count():
    c = RunConfig.from_dict({"architecture": [[1, 1], [2, 3]]})
    assert c.dataset.n_cascades == 2


def test_shipped_desk_config_loads():
    from pathlib import Path

    c = RunConfig.load(Path(__file__).parents[1] / "configs" / "desk.json")
    assert c.dataset.n_samples >= 20_000 and c.dataset.track_width == 3
    assert isinstance(c.eval, EvalConfig)


# -- gen ---------------------------------------------------------------------------


def test_gen_is_byte_identical(tmp_path, cfg, capsys):
    a, b = tmp_path / "a" / "d.lct", tmp_path / "b" / "d.lct"
    assert main(["gen", "--config", cfg, "--seed", "7", "--out", str(a)]) == 0
    assert main(["gen", "--config", cfg, "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert "60 samples" in capsys.readouterr().out
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    rec = m["runs"]["gen:d.lct"]
    assert rec["seed"] == 7 and len(rec["inputs"]["config"]["sha256"]) == 64
    assert "numpy" in m["versions"]


def test_gen_zero_samples_is_config_error(tmp_path):
    p = tmp_path / "z.json"
    p.write_text(json.dumps({"dataset": {"n_samples": 0}}))
    assert main(["gen", "--config", str(p), "--out", str(tmp_path / "z.lct")]) == 2


def test_gen_default_config_round_trips(tmp_path):
    out = tmp_path / "d.lct"
    assert main(["gen", "--n-samples", "3", "--out", str(out)]) == 0
    ds = read_dataset(out)
    want = DatasetConfig(n_samples=3)
    assert ds.config == want and ds.seed == 0


def test_usage_errors(tmp_path, cfg):
    assert main(["gen", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x.lct")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x.lct")]) == 2
    assert main(["nope"]) == 2
    assert main(["gen", "--threads", "0", "--out", str(tmp_path / "x.lct")]) == 2


def test_unwritable_output_is_runtime_error(tmp_path, cfg):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--config", cfg, "--out", str(blocker / "sub" / "d.lct")]) == 1


# -- train -------------------------------------------------------------------------


def test_train_missing_dataset(tmp_path, cfg):
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "none.lct"), "--out", str(tmp_path)]) == 2


def test_train_corrupt_dataset(tmp_path, cfg):
    p = tmp_path / "bad.lct"
    p.write_bytes(b"LCT1\x01")
    assert main(["train", "--config", cfg, "--data", str(p), "--out", str(tmp_path)]) == 2


def test_train_is_deterministic(tmp_path, cfg, pipeline):
    other = tmp_path / "again"
    assert main(["train", "--config", cfg, "--data", str(pipeline / "train.lct"), "--out", str(other)]) == 0
    assert (pipeline / "model.json").read_bytes() == (other / "model.json").read_bytes()
    assert (pipeline / "train_log.csv").read_bytes() == (other / "train_log.csv").read_bytes()
    header = (pipeline / "train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,step,loss_total,loss_final,loss_companion_1,loss_companion_2,loss_companion_3,penalty_C,C_hat"


# -- eval --------------------------------------------------------------------------


def test_eval_three_working_points(pipeline, capsys):
    run = pipeline
    args = ["eval", "--model", str(run / "model.json"), "--data", str(run / "test.lct"), "--out", str(run),
            "--calibration", str(run / "train.lct"), "--baseline-csv", "--save-models"]
    assert main(args) == 0
    rep = json.loads((run / "metrics.json").read_text())
    assert [w["target_efficiency"] for w in rep["working_points"]] == [0.9, 0.95, 0.99]
    assert rep["baseline"]["sweep"]
    with open(run / "baseline_sweep.csv") as f:
        eff = [float(r["signal_efficiency"]) for r in csv.DictReader(f)]
    assert all(a >= b for a, b in zip(eff, eff[1:]))
    assert (run / "model_eff0.95.json").is_file()
    assert "target 0.90" in capsys.readouterr().out
    assert "eval" in json.loads((run / "manifest.json").read_text())["runs"]


def test_eval_zero_thresholds(pipeline, tmp_path):
    out = tmp_path / "z"
    args = ["eval", "--model", str(pipeline / "model.json"), "--data", str(pipeline / "test.lct"), "--out", str(out),
            "--zero-thresholds"]
    assert main(args) == 0
    rep = json.loads((out / "metrics.json").read_text())
    assert len(rep["working_points"]) == 1
    assert rep["working_points"][0]["measured_C_hat"] == 1.0


def test_eval_splits_when_no_calibration_set(pipeline, tmp_path):
    out = tmp_path / "s"
    assert main(["eval", "--model", str(pipeline / "model.json"), "--data", str(pipeline / "test.lct"),
                 "--out", str(out), "--targets", "0.9"]) == 0
    rep = json.loads((out / "metrics.json").read_text())
    total = rep["n_regions_signal"] + rep["n_regions_background"]
    assert total == 30 * 4  # second half of 60 images, 2x2 final regions each


def test_eval_missing_model(pipeline, tmp_path):
    assert main(["eval", "--model", str(tmp_path / "m.json"), "--data", str(pipeline / "test.lct"),
                 "--out", str(tmp_path)]) == 2


# -- export-maps -------------------------------------------------------------------


def test_export_maps(pipeline, tmp_path):
    out = tmp_path / "maps"
    assert main(["export-maps", "--model", str(pipeline / "model.json"), "--data", str(pipeline / "test.lct"),
                 "--index", "2", "--thresholds", "0.3", "0.3", "0.3", "0.3", "--out", str(out)]) == 0
    files = sorted(p.name for p in out.glob("*.pgm"))
    assert len(files) == 9
    assert sum("dense" in f for f in files) == 4 and sum("binary" in f for f in files) == 4
    assert sum("truth" in f for f in files) == 1
    for f in files:
        if "binary" in f or "truth" in f:
            assert set(np.unique(read_pgm(out / f))) <= {0, 255}
    assert read_pgm(out / "sample2_dense_A1.pgm").shape == (16, 16)
    assert read_pgm(out / "sample2_truth.pgm").shape == (32, 32)


def test_export_maps_bad_index(pipeline, tmp_path):
    assert main(["export-maps", "--model", str(pipeline / "model.json"), "--data", str(pipeline / "test.lct"),
                 "--index", "999", "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "lazytrigger", "gen", "--n-samples", "2", "--out", str(tmp_path / "d.lct")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "lazytrigger", "train", "--data", str(tmp_path / "no.lct"),
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 2 and "not found" in r.stderr
