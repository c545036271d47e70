"""Train a small cascade, calibrate three working points and compare with a brightness cut.

Run: python demos/train_and_calibrate.py   (about a minute on one core)
"""
import numpy as np

from lazytrigger import (
    DatasetConfig,
    LossConfig,
    OptimizerConfig,
    baseline_sweep,
    calibrate_thresholds,
    evaluate,
    generate_dataset,
    init_model,
    train,
)
from lazytrigger.evaluation import best_baseline_rejection

cfg = DatasetConfig(n_samples=3000, track_intensity_mean=0.03, track_width=3, track_length_range=(20, 60))
train_set = generate_dataset(cfg, seed=1)
calib = generate_dataset(DatasetConfig(**{**cfg.to_dict(), "n_samples": 1000}), seed=2)
test = generate_dataset(DatasetConfig(**{**cfg.to_dict(), "n_samples": 1000}), seed=3)

init = init_model(seed=0, input_mean=float(train_set.images.mean()), input_std=float(train_set.images.std()))
model, log = train(train_set, init, LossConfig(gamma=0.3), OptimizerConfig(lr=0.01, epochs=4))
loss = log.column("loss_final")
print(f"final-cascade loss per epoch: {np.round(loss, 4).tolist()}")

sweep = baseline_sweep(test)
print("\n target  efficiency  rejection  baseline  C_hat  ops/pixel")
for target in (0.90, 0.95, 0.99):
    wp = evaluate(model, calibrate_thresholds(model, calib, target), test, target)
    base = best_baseline_rejection(sweep, wp.signal_efficiency)
    print(f"  {target:.2f}    {wp.signal_efficiency:.3f}      {wp.background_rejection:.3f}     {base:.3f}   "
          f"{wp.measured_C_hat:.3f}   {wp.ops_per_pixel:.2f}")
