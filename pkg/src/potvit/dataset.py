"""Synthetic token-grid classification data standing in for image patches."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng


@dataclass
class DatasetConfig:
    classes: int = 4
    samples: int = 512
    noise_sigma: float = 0.7
    seed: int = 0
    tokens: int = 16  # patch tokens; the model adds one class token
    dim: int = 16

    @classmethod
    def from_json(cls, path) -> "DatasetConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


@dataclass
class SyntheticDataset:
    config: DatasetConfig
    inputs: np.ndarray  # (samples, tokens, dim) float32
    labels: np.ndarray  # (samples,) int64

    def __len__(self):
        return len(self.labels)

    @property
    def train(self):
        n = int(0.8 * len(self))
        return self.inputs[:n], self.labels[:n]

    @property
    def val(self):
        n = int(0.8 * len(self))
        return self.inputs[n:], self.labels[n:]

    def calibration(self, n: int = 100) -> np.ndarray:
        """First n training inputs, mirroring a fixed calibration subset."""
        xs, _ = self.train
        return xs[:n]


def make_dataset(config: DatasetConfig) -> SyntheticDataset:
    """Gaussian clusters around per-class +-1 token patterns."""
    rng = Rng(config.seed)
    means = rng.rademacher((config.classes, config.tokens, config.dim))
    labels = rng.integers(0, config.classes, (config.samples,)).astype(np.int64)
    noise = rng.normal((config.samples, config.tokens, config.dim), 0.0, config.noise_sigma)
    inputs = (means[labels] + noise).astype(np.float32)
    return SyntheticDataset(config, inputs, labels)
