"""Synthetic faint-track images on Gaussian sensor noise.

Every sample draws from its own PCG64 stream seeded with
``SeedSequence([seed, sample_index])``, so a dataset is a pure function of
``(config, seed)`` and independent of generation order.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ContractError, FormatError, maxpool2

MAGIC = b"LCT1"
VERSION = 1


@dataclass
class DatasetConfig:
    image_size: int = 64
    noise_mean: float = 0.10
    noise_sigma: float = 0.03
    track_intensity_mean: float | None = None  # defaults to noise_sigma
    track_intensity_jitter: float | None = None  # defaults to 0.25 * mean
    track_length_range: tuple[float, float] = (10.0, 40.0)
    track_width: int = 1
    signal_fraction: float = 0.5
    n_samples: int = 1000
    n_cascades: int = 4

    def __post_init__(self):
        if self.track_intensity_mean is None:
            self.track_intensity_mean = self.noise_sigma
        if self.track_intensity_jitter is None:
            self.track_intensity_jitter = 0.25 * self.track_intensity_mean
        self.track_length_range = tuple(float(v) for v in self.track_length_range)
        self.validate()

    def validate(self):
        if self.n_cascades < 1:
            raise ContractError("n_cascades must be >= 1")
        if self.image_size < 2 or self.image_size % (2 ** self.n_cascades):
            raise ContractError(
                f"image_size {self.image_size} must be divisible by 2**{self.n_cascades}"
            )
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise ContractError("signal_fraction must lie in [0, 1]")
        for name in ("noise_mean", "noise_sigma", "track_intensity_mean", "track_intensity_jitter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.track_length_range
        if lo < 2 or hi < lo:
            raise ContractError(f"bad track_length_range {self.track_length_range}")
        if self.track_width < 1 or hi + self.track_width > self.image_size:
            raise ContractError("track does not fit in the image")
        if self.n_samples < 1:
            raise ContractError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["track_length_range"] = list(self.track_length_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ContractError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float64
    truth: np.ndarray  # (H, W) uint8
    truth_pyramid: list[np.ndarray] = field(default_factory=list)  # Y^1..Y^n

    @property
    def levels(self) -> list[np.ndarray]:
        """Truth maps Y^0..Y^n."""
        return [self.truth, *self.truth_pyramid]

    @property
    def has_track(self) -> bool:
        return bool(self.truth.any())


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def truth_pyramid(truth: np.ndarray, n_cascades: int) -> list[np.ndarray]:
    levels = []
    y = truth
    for _ in range(n_cascades):
        y = maxpool2(y)
        levels.append(y)
    return levels


def _rasterize(start: np.ndarray, angle: float, n_pixels: int) -> np.ndarray:
    # DDA: one pixel per step along the dominant axis
    d = np.array([np.cos(angle), np.sin(angle)])
    step = d / np.abs(d).max()
    t = np.arange(n_pixels)[:, None]
    return np.floor(start + t * step + 0.5).astype(np.int64)


def generate_track(rng: np.random.Generator, config: DatasetConfig):
    """Draw one straight track fully inside the image.

    Returns ``(pixels, intensities)`` where ``pixels`` is an ``(N, 2)`` int
    array of ``(x, y)`` coordinates. The track length is the number of
    pixels along the dominant axis of the line, drawn uniformly from
    ``track_length_range``. Segments that leave the image are redrawn.
    """
    size = config.image_size
    w = config.track_width
    lo_off, hi_off = -((w - 1) // 2), w // 2
    lo, hi = config.track_length_range
    while True:
        n = max(2, int(round(rng.uniform(lo, hi))))
        angle = rng.uniform(0.0, 2.0 * np.pi)
        start = rng.uniform(0.0, size, size=2)
        pts = _rasterize(start, angle, n)
        if pts.min() + lo_off >= 0 and pts.max() + hi_off < size:
            break
    if w > 1:
        offs = np.array([(dx, dy) for dx in range(lo_off, hi_off + 1) for dy in range(lo_off, hi_off + 1)])
        pts = (pts[:, None, :] + offs[None]).reshape(-1, 2)
    pts = np.unique(pts, axis=0)
    intensity = np.maximum(
        0.0, rng.normal(config.track_intensity_mean, config.track_intensity_jitter, size=len(pts))
    )
    return pts, intensity


def generate_sample(rng: np.random.Generator, config: DatasetConfig) -> Sample:
    size = config.image_size
    is_signal = rng.uniform() < config.signal_fraction
    image = rng.normal(config.noise_mean, config.noise_sigma, size=(size, size))
    truth = np.zeros((size, size), dtype=np.uint8)
    if is_signal:
        pts, intensity = generate_track(rng, config)
        image[pts[:, 1], pts[:, 0]] += intensity
        truth[pts[:, 1], pts[:, 0]] = 1
    image = np.clip(image, 0.0, 1.0)
    return Sample(image[None], truth, truth_pyramid(truth, config.n_cascades))


@dataclass
class Dataset:
    """A stack of samples with shared geometry.

    ``images`` is ``(N, H, W)``; ``levels[i]`` is ``(N, H/2**i, W/2**i)``
    holding truth maps Y^i for every sample.
    """

    images: np.ndarray
    levels: list[np.ndarray]
    config: DatasetConfig | None = None
    seed: int | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i][None], self.levels[0][i], [y[i] for y in self.levels[1:]])

    @property
    def n_cascades(self) -> int:
        return len(self.levels) - 1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], [y[idx] for y in self.levels], self.config, self.seed)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], config=None, seed=None) -> "Dataset":
        if len(samples) == 0:
            raise ContractError("cannot build a dataset from zero samples")
        images = np.stack([s.image[0] for s in samples]).astype(np.float64)
        n_levels = len(samples[0].levels)
        levels = [np.stack([s.levels[i] for s in samples]).astype(np.uint8) for i in range(n_levels)]
        return cls(images, levels, config, seed)


def generate_dataset(config: DatasetConfig, seed: int) -> Dataset:
    samples = [generate_sample(sample_rng(seed, i), config) for i in range(config.n_samples)]
    return Dataset.from_samples(samples, config, seed)


def write_dataset(samples, path) -> None:
    """Write samples in the ``LCT1`` container format."""
    ds = samples if isinstance(samples, Dataset) else Dataset.from_samples(list(samples))
    if len(ds) == 0:
        raise ContractError("refusing to write an empty dataset")
    n, h, w = ds.images.shape
    if h != w:
        raise ContractError("only square images are supported")
    trailer = json.dumps(
        {"config": ds.config.to_dict() if ds.config else None, "seed": ds.seed},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<4I", VERSION, n, h, ds.n_cascades))
        for j in range(n):
            f.write(ds.images[j].astype("<f8").tobytes())
            for y in ds.levels:
                f.write(y[j].astype(np.uint8).tobytes())
        f.write(struct.pack("<I", len(trailer)))
        f.write(trailer)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_dataset(path) -> Dataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'LCT1'", 0)
    version, n, size, n_cascades = struct.unpack("<4I", r.take(16, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n == 0 or size == 0 or size % (2**n_cascades):
        raise FormatError(f"inconsistent shape n={n} size={size} cascades={n_cascades}", 8)
    images = np.empty((n, size, size))
    sides = [size >> i for i in range(n_cascades + 1)]
    levels = [np.empty((n, s, s), dtype=np.uint8) for s in sides]
    for j in range(n):
        images[j] = np.frombuffer(r.take(8 * size * size, f"image {j}"), dtype="<f8").reshape(size, size)
        for lvl, s in zip(levels, sides):
            lvl[j] = np.frombuffer(r.take(s * s, f"truth map of sample {j}"), dtype=np.uint8).reshape(s, s)
    (length,) = struct.unpack("<I", r.take(4, "trailer length"))
    at = r.pos
    try:
        meta = json.loads(r.take(length, "trailer").decode("utf-8"))
        config = DatasetConfig.from_dict(meta["config"]) if meta.get("config") else None
        seed = meta.get("seed")
    except (ValueError, KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"bad JSON trailer: {exc}", at) from exc
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after JSON trailer", r.pos)
    return Dataset(images, levels, config, seed)
