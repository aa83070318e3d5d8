"""Two-dimensional toy distributions, standardization, splits and CSV I/O.

The constructions follow the usual FFJORD-style generators. Their constants
are frozen below so that tests can use the generators themselves as ground
truth (for example the eight mixture means).
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateDataError, DimensionError

EIGHT_GAUSSIANS_RADIUS = 2.0
EIGHT_GAUSSIANS_STD = 0.02 * EIGHT_GAUSSIANS_RADIUS
SPIRAL_NOISE = 0.1
MOONS_NOISE = 0.1
PINWHEEL_ARMS = 5
PINWHEEL_RADIAL_STD = 0.3
PINWHEEL_TANGENTIAL_STD = 0.1
PINWHEEL_RATE = 0.25
VALID_FRACTION = 0.1


def eight_gaussian_means() -> np.ndarray:
    angles = np.arange(8) * (np.pi / 4)
    return EIGHT_GAUSSIANS_RADIUS * np.column_stack([np.cos(angles), np.sin(angles)])


def _eight_gaussians(n, rng):
    means = eight_gaussian_means()
    return means[rng.integers(0, 8, n)] + EIGHT_GAUSSIANS_STD * rng.standard_normal((n, 2))


def _two_spirals(n, rng):
    m = (n + 1) // 2
    t = np.sqrt(rng.uniform(size=m)) * 540.0 * (2 * np.pi) / 360.0
    arm = np.column_stack([-np.cos(t) * t + 0.5 * rng.uniform(size=m),
                           np.sin(t) * t + 0.5 * rng.uniform(size=m)])
    pts = np.concatenate([arm, -arm])[:n] / 3.0
    return pts + SPIRAL_NOISE * rng.standard_normal((n, 2))


def _checkerboard(n, rng):
    x1 = rng.uniform(size=n) * 4.0 - 2.0
    x2 = rng.uniform(size=n) - 2.0 * rng.integers(0, 2, n)
    x2 = x2 + np.floor(x1) % 2
    return 2.0 * np.column_stack([x1, x2])


def _two_moons(n, rng):
    outer = rng.uniform(size=n) < 0.5
    t = np.pi * rng.uniform(size=n)
    x = np.where(outer, np.cos(t), 1.0 - np.cos(t))
    y = np.where(outer, np.sin(t), 0.5 - np.sin(t))
    pts = np.column_stack([x, y]) + MOONS_NOISE * rng.standard_normal((n, 2))
    return 2.0 * pts + np.array([-1.0, -0.2])


def _pinwheel(n, rng):
    rads = np.linspace(0.0, 2 * np.pi, PINWHEEL_ARMS, endpoint=False)
    feats = rng.standard_normal((n, 2)) * np.array([PINWHEEL_RADIAL_STD, PINWHEEL_TANGENTIAL_STD])
    feats[:, 0] += 1.0
    labels = np.arange(n) % PINWHEEL_ARMS
    angles = rads[labels] + PINWHEEL_RATE * np.exp(feats[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    pts = np.column_stack([feats[:, 0] * c - feats[:, 1] * s, feats[:, 0] * s + feats[:, 1] * c])
    return 2.0 * pts


GENERATORS = {
    "eight_gaussians": _eight_gaussians,
    "two_spirals": _two_spirals,
    "checkerboard": _checkerboard,
    "two_moons": _two_moons,
    "pinwheel": _pinwheel,
}


def sample_toy(name: str, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points of toy distribution ``name``, shuffled, deterministic in ``seed``."""
    if name not in GENERATORS:
        raise ConfigurationError(f"unknown toy dataset {name!r}; choose from {sorted(GENERATORS)}")
    if int(n) != n or n < 1:
        raise ConfigurationError(f"need at least one point, got n={n}")
    rng = np.random.default_rng(seed)
    pts = GENERATORS[name](int(n), rng)
    return np.ascontiguousarray(pts[rng.permutation(pts.shape[0])])


@dataclass(frozen=True)
class Stats:
    mean: np.ndarray
    std: np.ndarray


def standardize(points, stats: Stats | None = None):
    """Per-dimension affine map to zero mean and unit deviation.

    Statistics are computed from ``points`` unless given. Returns
    ``(standardized, stats)``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a point matrix, got shape {x.shape}")
    if stats is None:
        if x.shape[0] == 0:
            raise DegenerateDataError("cannot estimate statistics from zero points")
        std = x.std(axis=0)
        bad = np.flatnonzero(~(std > 0))
        if bad.size:
            raise DegenerateDataError(f"dimension {int(bad[0])} has zero standard deviation")
        stats = Stats(x.mean(axis=0), std)
    elif stats.mean.shape != (x.shape[1],):
        raise DimensionError(f"stats are for {stats.mean.shape[0]} dimensions, data has {x.shape[1]}")
    return (x - stats.mean) / stats.std, stats


def destandardize(points, stats: Stats) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * stats.std + stats.mean


@dataclass
class Dataset:
    """Points with a seeded train/validation split; ``stats`` come from the train part."""
    points: np.ndarray
    train_idx: np.ndarray
    valid_idx: np.ndarray
    stats: Stats

    @classmethod
    def split(cls, points, seed: int = 0, valid_fraction: float = VALID_FRACTION) -> "Dataset":
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        if not 0 < valid_fraction < 1:
            raise ConfigurationError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
        n_valid = int(round(n * valid_fraction))
        if n_valid < 1 or n_valid >= n:
            raise DegenerateDataError(f"cannot split {n} points into non-empty train and validation sets")
        order = np.random.default_rng(seed).permutation(n)
        train_idx, valid_idx = np.sort(order[n_valid:]), np.sort(order[:n_valid])
        _, stats = standardize(points[train_idx])
        return cls(points, train_idx, valid_idx, stats)

    @property
    def train(self) -> np.ndarray:
        return self.points[self.train_idx]

    @property
    def valid(self) -> np.ndarray:
        return self.points[self.valid_idx]


def write_csv(path, points) -> None:
    """Header ``x0,x1,...`` then one row per point at 17 significant digits."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a point matrix, got shape {x.shape}")
    header = ",".join(f"x{j}" for j in range(x.shape[1]))
    buf = io.StringIO()
    np.savetxt(buf, x, fmt="%.17g", delimiter=",", header=header, comments="")
    with open(path, "w", newline="\n") as fh:
        fh.write(buf.getvalue() if x.shape[0] else header + "\n")


def read_csv(path) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise DimensionError(f"{path}: missing header line")
        d = len(header.split(","))
        body = fh.read()
    if not body.strip():
        return np.empty((0, d))
    x = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2, dtype=np.float64)
    if x.shape[1] != d:
        raise DimensionError(f"{path}: header names {d} columns, rows have {x.shape[1]}")
    return x
