"""Run configuration: one JSON document covering data, model, training and evaluation."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import ContractError
from .dataset import DatasetConfig
from .model import HALO_MODES, REFERENCE_ARCHITECTURE
from .train import LossConfig, OptimizerConfig


@dataclass
class EvalConfig:
    targets: list[float] = field(default_factory=lambda: [0.90, 0.95, 0.99])
    halo: str = "zero"
    calibration_fraction: float = 0.5  # share of the eval set used to calibrate

    def __post_init__(self):
        if not self.targets or any(not 0.0 < t <= 1.0 for t in self.targets):
            raise ContractError("eval targets must lie in (0, 1]")
        if self.halo not in HALO_MODES:
            raise ContractError(f"halo must be one of {HALO_MODES}")
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ContractError("calibration_fraction must lie in (0, 1)")


def _build(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ContractError(f"section {section!r} must be an object")
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ContractError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ContractError(f"bad {section!r} section: {exc}") from exc


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    architecture: list[tuple[int, int]] = field(default_factory=lambda: list(REFERENCE_ARCHITECTURE))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.architecture = [tuple(int(v) for v in a) for a in self.architecture]
        if not self.architecture or any(len(a) != 2 or a[0] < 1 or a[1] < 1 or a[1] % 2 == 0 for a in self.architecture):
            raise ContractError("architecture must be a list of [filters, odd kernel_size] pairs")
        if len(self.architecture) != self.dataset.n_cascades:
            raise ContractError(
                f"architecture has {len(self.architecture)} cascades, dataset.n_cascades is {self.dataset.n_cascades}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ContractError("run config must be a JSON object")
        sections = {"dataset": DatasetConfig, "loss": LossConfig, "optimizer": OptimizerConfig, "eval": EvalConfig}
        unknown = set(d) - set(sections) - {"architecture"}
        if unknown:
            raise ContractError(f"unknown top-level keys: {sorted(unknown)}")
        kwargs = {name: _build(c, d[name], name) for name, c in sections.items() if name in d}
        if "architecture" in d:
            kwargs["architecture"] = d["architecture"]
            if "dataset" not in d:
                kwargs["dataset"] = DatasetConfig(n_cascades=len(d["architecture"]))
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ContractError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "loss": dataclasses.asdict(self.loss),
            "optimizer": dataclasses.asdict(self.optimizer),
            "architecture": [list(a) for a in self.architecture],
            "eval": dataclasses.asdict(self.eval),
        }
