"""Class-conditional 2-D Gaussian mixtures (ring and grid layouts)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class DatasetSpec:
    kind: str = "ring"
    n_modes: int = 8
    radius: float = 2.0  # ring radius, or lattice pitch for grids
    mode_std: float = 0.02
    classes: str = "one-per-mode"
    n_classes: Optional[int] = None  # only for classes="k-classes"

    def __post_init__(self):
        if self.kind not in ("ring", "grid"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n_modes < 2:
            raise ValueError("need at least 2 modes")
        if self.mode_std <= 0:
            raise ValueError("mode_std must be positive")
        if self.classes not in ("one-per-mode", "k-classes"):
            raise ValueError(f"unknown class assignment {self.classes!r}")


@dataclass
class MixtureSpec:
    centers: np.ndarray  # (K, 2)
    std: float
    mode_class: np.ndarray  # (K,) int

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.mode_class = np.asarray(self.mode_class, dtype=np.int64)
        if len(self.centers) < 1:
            raise ValueError("mixture needs at least one mode")
        if self.std <= 0:
            raise ValueError("mode std must be positive")

    @property
    def n_modes(self) -> int:
        return len(self.centers)

    @property
    def n_classes(self) -> int:
        return int(self.mode_class.max()) + 1


def make_mixture(spec: DatasetSpec) -> MixtureSpec:
    K = spec.n_modes
    if spec.kind == "ring":
        ang = 2.0 * np.pi * np.arange(K) / K
        centers = np.stack([spec.radius * np.cos(ang), spec.radius * np.sin(ang)], axis=1)
    else:
        side = math.isqrt(K)
        if side * side != K:
            raise ValueError(f"grid layout needs a square number of modes, got {K}")
        offs = (np.arange(side) - (side - 1) / 2.0) * spec.radius
        gx, gy = np.meshgrid(offs, offs, indexing="ij")
        centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if spec.classes == "one-per-mode":
        labels = np.arange(K)
    else:
        n = spec.n_classes or K
        labels = np.arange(K) % n
    return MixtureSpec(centers=centers, std=spec.mode_std, mode_class=labels)


def sample_real(mixture: MixtureSpec, batch: int, rng: np.random.Generator,
                y: Optional[int] = None) -> tuple:
    """Draw ``(points, labels)``; with ``y`` set, only that class's modes are used."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if y is None:
        modes = rng.integers(0, mixture.n_modes, size=batch)
    else:
        allowed = np.flatnonzero(mixture.mode_class == y)
        if allowed.size == 0:
            raise ValueError(f"unknown class {y}")
        modes = allowed[rng.integers(0, allowed.size, size=batch)]
    pts = mixture.centers[modes] + mixture.std * rng.standard_normal((batch, 2))
    return pts, mixture.mode_class[modes]


def dump_points(path, points: np.ndarray, labels: np.ndarray) -> None:
    """Write ``points.csv`` with header ``x0,x1,label``."""
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x0,x1,label\n")
        for (a, b), lab in zip(points, labels):
            fh.write(f"{a:.17g},{b:.17g},{int(lab)}\n")
