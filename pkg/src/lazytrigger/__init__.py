"""Lazy convolutional-cascade trigger for faint straight tracks in noisy images."""
from .core import ContractError, ConvSpec, FormatError, TriggerParams, conv2d, maxpool2, relu, trigger_eval
from .dataset import Dataset, DatasetConfig, Sample, generate_dataset, generate_sample, generate_track, read_dataset, write_dataset
from .model import (
    REFERENCE_ARCHITECTURE,
    Cascade,
    CnnTrigger,
    DenseTrace,
    LazyTrace,
    OpCounter,
    count_full_cost,
    dense_forward,
    init_model,
    lazy_forward,
    load_model,
    save_model,
)
from .evaluation import (
    CalibrationError,
    WorkingPoint,
    background_rejection,
    baseline_sweep,
    build_report,
    calibrate_thresholds,
    evaluate,
    normalized_complexity,
    ops_per_pixel,
    signal_efficiency,
)
from .train import LossConfig, OptimizerConfig, backward, cascade_loss, complexity_penalty, per_cascade_cost, total_loss, train

__version__ = "0.1.0"
