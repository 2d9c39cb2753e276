"""Latent distributions, truncated sampling and variance schedules.

Random numbers come from numpy's Philox4x64-10 counter-based generator.  A
stream is identified by ``(seed, stream_id)``, packed into the 128-bit
Philox key as ``seed + stream_id * 2**64``; distinct streams never overlap,
so e.g. telemetry can draw numbers without perturbing the data stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor

KINDS = (
    "gaussian",
    "uniform",
    "bernoulli01",
    "censored_normal",
    "bernoulli_pm1",
    "categorical3",
    "gaussian_times_bernoulli",
    "concat_gaussian_bernoulli",
    "variance_annealed",
    "per_sample_variance",
)
GAUSSIAN_FAMILY = ("gaussian", "variance_annealed", "per_sample_variance")

MIN_THRESHOLD = 0.01


class Stream(IntEnum):
    INIT = 0
    DATA = 1
    LATENT = 2
    CLASS = 3
    DROPOUT = 4
    TELEMETRY = 5
    EVAL = 6
    HELDOUT = 7
    STANDING = 8
    SPECTRAL = 9


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream)``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return np.random.Generator(np.random.Philox(key=int(seed) + (int(stream) << 64)))


def rng_state_array(rng: np.random.Generator) -> np.ndarray:
    """Flatten a Philox generator's state into a uint64 vector."""
    st = rng.bit_generator.state
    s = st["state"]
    return np.concatenate([
        np.asarray(s["counter"], dtype=np.uint64),
        np.asarray(s["key"], dtype=np.uint64),
        np.asarray(st["buffer"], dtype=np.uint64),
        np.array([st["buffer_pos"], st["has_uint32"], st["uinteger"]], dtype=np.uint64),
    ])


def rng_from_state_array(arr: np.ndarray) -> np.random.Generator:
    arr = np.asarray(arr, dtype=np.uint64)
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {"counter": arr[0:4].copy(), "key": arr[4:6].copy()},
        "buffer": arr[6:10].copy(),
        "buffer_pos": int(arr[10]),
        "has_uint32": int(arr[11]),
        "uinteger": int(arr[12]),
    }
    return np.random.Generator(bg)


@dataclass
class LatentSpec:
    """One latent distribution plus optional truncation.

    ``schedule`` holds ``(step, sigma)`` knots for ``variance_annealed``;
    ``sigma_l``/``sigma_h`` bound the per-sample scale of
    ``per_sample_variance``.  ``truncation_mode`` is ``"coordinate"``
    (resample only offending values) or ``"vector"`` (redraw the whole row).
    """

    dim: int = 32
    kind: str = "gaussian"
    schedule: tuple = ((0, 2.0), (20000, 1.0))
    sigma_l: float = 0.5
    sigma_h: float = 1.5
    truncation: Optional[float] = None
    truncation_mode: str = "coordinate"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown latent kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("latent dim must be >= 1")
        if self.kind == "concat_gaussian_bernoulli" and self.dim % 2:
            raise ValueError("concat_gaussian_bernoulli needs an even dim")
        if self.truncation is not None:
            if self.truncation <= 0:
                raise ValueError("truncation threshold must be > 0")
            if self.kind not in GAUSSIAN_FAMILY:
                raise ValueError(f"truncation is only defined for gaussian latents, not {self.kind!r}")
        if self.truncation_mode not in ("coordinate", "vector"):
            raise ValueError(f"unknown truncation_mode {self.truncation_mode!r}")


def anneal_sigma(schedule: Sequence, step: int) -> float:
    """Piecewise-linear interpolation of ``(step, sigma)`` knots, clamped at both ends."""
    if len(schedule) == 0:
        raise ValueError("empty sigma schedule")
    xs = np.array([k[0] for k in schedule], dtype=np.float64)
    ys = np.array([k[1] for k in schedule], dtype=np.float64)
    if np.any(np.diff(xs) <= 0):
        raise ValueError("schedule steps must be strictly increasing")
    return float(np.interp(step, xs, ys))


def per_sample_sigma(sigma_l: float, sigma_h: float, batch: int, rng: np.random.Generator) -> np.ndarray:
    if not 0 < sigma_l <= sigma_h:
        raise ValueError(f"need 0 < sigma_l <= sigma_h, got ({sigma_l}, {sigma_h})")
    if sigma_l == sigma_h:
        return np.full(batch, float(sigma_l))
    return rng.uniform(sigma_l, sigma_h, size=batch)


def truncated_normal(shape: tuple, threshold: float, rng: np.random.Generator,
                     mode: str = "coordinate") -> np.ndarray:
    """Standard normal draws conditioned on ``|z| <= threshold``.

    Rejection by resampling: in ``coordinate`` mode only the offending values
    are redrawn, in ``vector`` mode any row with an offending value is.
    """
    if threshold < MIN_THRESHOLD:
        raise ValueError(f"threshold {threshold} below {MIN_THRESHOLD}: resampling would not terminate in practice")
    z = rng.standard_normal(shape)
    if mode == "coordinate":
        bad = np.abs(z) > threshold
        while bad.any():
            z[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > threshold
    elif mode == "vector":
        z = z.reshape(shape[0], -1)
        bad = (np.abs(z) > threshold).any(axis=1)
        while bad.any():
            z[bad] = rng.standard_normal((int(bad.sum()), z.shape[1]))
            bad = (np.abs(z) > threshold).any(axis=1)
        z = z.reshape(shape)
    else:
        raise ValueError(f"unknown truncation mode {mode!r}")
    return z


def _draw(spec: LatentSpec, batch: int, rng: np.random.Generator, step: int,
          threshold: Optional[float]) -> np.ndarray:
    shape = (batch, spec.dim)

    def normal(sh):
        if threshold is None:
            return rng.standard_normal(sh)
        return truncated_normal(sh, threshold, rng, spec.truncation_mode)

    kind = spec.kind
    if kind == "gaussian":
        return normal(shape)
    if kind == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape)
    if kind == "bernoulli01":
        return rng.integers(0, 2, size=shape).astype(np.float64)
    if kind == "censored_normal":
        return np.maximum(rng.standard_normal(shape), 0.0)
    if kind == "bernoulli_pm1":
        return 2.0 * rng.integers(0, 2, size=shape) - 1.0
    if kind == "categorical3":
        return rng.integers(-1, 2, size=shape).astype(np.float64)
    if kind == "gaussian_times_bernoulli":
        return rng.standard_normal(shape) * rng.integers(0, 2, size=shape)
    if kind == "concat_gaussian_bernoulli":
        half = spec.dim // 2
        return np.concatenate([rng.standard_normal((batch, half)),
                               rng.integers(0, 2, size=(batch, half)).astype(np.float64)], axis=1)
    if kind == "variance_annealed":
        return anneal_sigma(spec.schedule, step) * normal(shape)
    if kind == "per_sample_variance":
        s = per_sample_sigma(spec.sigma_l, spec.sigma_h, batch, rng)
        return s[:, None] * normal(shape)
    raise ValueError(f"unknown latent kind {kind!r}")


def sample(spec: LatentSpec, batch: int, rng: np.random.Generator, step: int = 0) -> Tensor:
    """Draw ``batch`` i.i.d. latent rows; applies ``spec.truncation`` when set."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return Tensor(_draw(spec, batch, rng, step, spec.truncation))


def sample_truncated(spec: LatentSpec, threshold: float, batch: int, rng: np.random.Generator,
                     step: int = 0) -> Tensor:
    """Gaussian-family draw with every coordinate resampled into ``[-threshold, threshold]``."""
    if spec.kind not in GAUSSIAN_FAMILY:
        raise ValueError(f"truncated sampling needs a gaussian latent, got {spec.kind!r}")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return Tensor(_draw(spec, batch, rng, step, threshold))
