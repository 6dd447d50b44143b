"""Toy target distributions.

All samplers are pure functions of ``(spec, n, rng)``. Two-dimensional datasets
can be tiled to any even dimension by concatenating independent draws, which is
how the longer-sequence configurations (e.g. d=16) are built.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

NAMES = ("gmm8", "two_moons", "checkerboard", "ring", "gauss1d")

# Gaussian noise in the toy sets is truncated at this many standard deviations
# so that every dataset has a hard support bound.
TRUNCATE_SIGMAS = 6.0


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    dim: int = 0
    mu: float = 0.0
    sigma: float = 1.0
    noise: float = 0.0

    def __post_init__(self) -> None:
        if self.name not in NAMES:
            raise ConfigError(f"unknown dataset {self.name!r}; expected one of {NAMES}")
        base = 1 if self.name == "gauss1d" else 2
        dim = self.dim or base
        if dim % base:
            raise ConfigError(f"{self.name} dimension must be a multiple of {base}, got {dim}")
        object.__setattr__(self, "dim", dim)
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.noise == 0.0 and self.name in ("two_moons", "ring", "gmm8"):
            default = {"two_moons": 0.05, "ring": 0.05, "gmm8": 0.1}[self.name]
            object.__setattr__(self, "noise", default)

    @property
    def support_radius(self) -> float:
        """Bound on the norm of one 2-D (or 1-D) block of a sample."""
        t = TRUNCATE_SIGMAS
        if self.name == "gmm8":
            return 2.0 + t * self.noise
        if self.name == "ring":
            return 1.0 + t * self.noise
        if self.name == "two_moons":
            return math.hypot(2.0, 1.0) + t * self.noise
        if self.name == "checkerboard":
            return 2.0 * math.sqrt(2.0)
        return abs(self.mu) + t * self.sigma


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normal rows whose Euclidean norm is at most TRUNCATE_SIGMAS."""
    out = rng.standard_normal(shape)
    bad = np.linalg.norm(out.reshape(shape[0], -1), axis=1) > TRUNCATE_SIGMAS
    while bad.any():
        out[bad] = rng.standard_normal((int(bad.sum()),) + shape[1:])
        bad = np.linalg.norm(out.reshape(shape[0], -1), axis=1) > TRUNCATE_SIGMAS
    return out


def _gmm8(n, rng, noise):
    k = rng.integers(0, 8, size=n)
    angle = 2.0 * np.pi * k / 8.0
    means = 2.0 * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return means + noise * _truncated_normal(rng, (n, 2))


def _two_moons(n, rng, noise):
    upper = rng.random(n) < 0.5
    theta = np.pi * rng.random(n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    return np.stack([x, y], axis=1) + noise * _truncated_normal(rng, (n, 2))


def _checkerboard(n, rng):
    x1 = rng.random(n) * 4.0 - 2.0
    x2 = rng.random(n) - 2.0 * rng.integers(0, 2, size=n)
    x2 = x2 + np.floor(x1) % 2
    return np.stack([x1, x2], axis=1)


def _ring(n, rng, noise):
    theta = 2.0 * np.pi * rng.random(n)
    circle = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return circle + noise * _truncated_normal(rng, (n, 2))


def _block(spec: DatasetSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.name == "gmm8":
        return _gmm8(n, rng, spec.noise)
    if spec.name == "two_moons":
        return _two_moons(n, rng, spec.noise)
    if spec.name == "checkerboard":
        return _checkerboard(n, rng)
    if spec.name == "ring":
        return _ring(n, rng, spec.noise)
    return spec.mu + spec.sigma * _truncated_normal(rng, (n, 1))


def sample_dataset(spec: DatasetSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points of shape ``(n, spec.dim)``."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    base = 1 if spec.name == "gauss1d" else 2
    blocks = [_block(spec, n, rng) for _ in range(spec.dim // base)]
    return np.concatenate(blocks, axis=1)


def dump_csv(samples: np.ndarray, path: str | Path) -> None:
    samples = np.asarray(samples)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"dim_{j}" for j in range(samples.shape[1])])
        for row in samples:
            writer.writerow([repr(float(v)) for v in row])


def load_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
