"""Sample-quality measures for 2-D mixtures: Frechet distance, mode coverage,
truncation sweeps and the discriminator memorization check."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import MixtureSpec
from .latent import LatentSpec, sample_truncated

FD_JITTER = 1e-10
DEFAULT_THRESHOLDS = (2.0, 1.0, 0.5, 0.04)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_from_moments(mu1, S1, mu2, S2) -> float:
    """``||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of the cross term is evaluated as the sum of square roots of
    the eigenvalues of the symmetric matrix ``S1^(1/2) S2 S1^(1/2)``, with
    negative eigenvalues (sampling noise) clamped to zero.
    """
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    S1, S2 = np.atleast_2d(S1).astype(float), np.atleast_2d(S2).astype(float)
    r1 = _psd_sqrt(S1)
    M = r1 @ S2 @ r1
    w = np.linalg.eigvalsh((M + M.T) / 2.0)
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(S1) + np.trace(S2) - 2.0 * cross)


def fit_gaussian(x: np.ndarray) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if n < dim + 1:
        raise ValueError(f"need at least {dim + 1} points to fit a {dim}-D Gaussian, got {n}")
    cov = np.cov(x, rowvar=False) + FD_JITTER * np.eye(dim)
    return x.mean(axis=0), cov


def frechet_distance(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two point sets.

    A ``1e-10`` diagonal jitter is added to both covariances so that
    degenerate sets (e.g. all points identical) stay well defined.
    """
    mu1, s1 = fit_gaussian(samples_a)
    mu2, s2 = fit_gaussian(samples_b)
    return frechet_from_moments(mu1, s1, mu2, s2)


def mode_coverage(samples: np.ndarray, mixture: MixtureSpec, radius_mult: float = 3.0) -> tuple:
    """Return ``(modes_hit, high_quality_fraction)``.

    A sample is high quality when it lies within ``radius_mult * std`` of some
    center; a mode is hit when at least ``max(1, 0.1 * n / K)`` samples lie
    within that radius of it.
    """
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no samples")
    d = np.linalg.norm(x[:, None, :] - mixture.centers[None, :, :], axis=2)
    near = d <= radius_mult * mixture.std
    need = max(1.0, 0.1 * len(x) / mixture.n_modes)
    hits = int((near.sum(axis=0) >= need).sum())
    return hits, float(near.any(axis=1).mean())


def class_spread(x: np.ndarray, y: np.ndarray) -> float:
    """Mean pairwise distance between generated samples of the same class,
    averaged over classes."""
    vals = []
    for c in np.unique(y):
        pts = x[y == c]
        if len(pts) < 2:
            continue
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
        n = len(pts)
        vals.append(d.sum() / (n * (n - 1)))
    return float(np.mean(vals)) if vals else 0.0


def paired_spread(x: np.ndarray, y: np.ndarray) -> tuple:
    """Within-class distances over disjoint sample pairs: ``(mean, standard error)``.

    Disjoint pairs make the distances independent, which gives an honest
    standard error for comparing spreads between thresholds.
    """
    ds = []
    for c in np.unique(y):
        pts = x[y == c]
        h = len(pts) // 2
        if h:
            ds.append(np.linalg.norm(pts[:h] - pts[h:2 * h], axis=1))
    if not ds:
        return 0.0, 0.0
    d = np.concatenate(ds)
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
    return float(d.mean()), se


@dataclass
class CurvePoint:
    threshold: float
    frechet_distance: float
    spread: float
    high_quality_fraction: float
    modes_hit: int = 0
    paired_spread: float = 0.0
    paired_spread_se: float = 0.0


@dataclass
class TruncationCurve:
    points: List[CurvePoint] = field(default_factory=list)

    @property
    def thresholds(self) -> list:
        return [p.threshold for p in self.points]

    def rows(self) -> list:
        return [(p.threshold, p.frechet_distance, p.spread, p.high_quality_fraction) for p in self.points]


def generate(G, z, y) -> np.ndarray:
    with ad.no_grad():
        return G.forward(z, y, mode="eval").data


def truncation_sweep(G, latent: LatentSpec, mixture: MixtureSpec, reference: np.ndarray,
                     thresholds: Sequence[float] = DEFAULT_THRESHOLDS, n: int = 10_000,
                     rng: Optional[np.random.Generator] = None, num_classes: Optional[int] = None,
                     radius_mult: float = 3.0) -> TruncationCurve:
    """Evaluate an (EMA) generator with standing statistics at each truncation threshold."""
    thresholds = [float(t) for t in thresholds]
    if any(b >= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly decreasing")
    if any(bn.standing_mean is None for bn in G.bns):
        raise RuntimeError("compute standing statistics before a truncation sweep")
    rng = rng if rng is not None else np.random.default_rng(0)
    k = num_classes or mixture.n_classes
    curve = TruncationCurve()
    for t in thresholds:
        z = sample_truncated(latent, t, n, rng)
        y = rng.integers(0, k, size=n)
        x = generate(G, z, y)
        hits, hq = mode_coverage(x, mixture, radius_mult)
        ps, se = paired_spread(x, y)
        curve.points.append(CurvePoint(t, frechet_distance(x, reference), class_spread(x, y), hq, hits, ps, se))
    return curve


def _row_hashes(x: np.ndarray) -> set:
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    return {hashlib.sha1(row.tobytes()).hexdigest() for row in x}


def d_memorization_check(D: Callable, train: tuple, heldout: tuple, fakes: tuple) -> tuple:
    """Real-vs-fake accuracy of ``sign(D(x, y))`` on training and held-out reals.

    ``train``, ``heldout`` and ``fakes`` are ``(points, labels)`` pairs of the
    same size; the same fakes are scored for both accuracies.  ``D`` is any
    callable returning one score per row.
    """
    (xt, yt), (xh, yh), (xf, yf) = train, heldout, fakes
    if _row_hashes(xt) & _row_hashes(xh):
        raise ValueError("training and held-out sets overlap")

    def scores(x, y):
        with ad.no_grad():
            out = D(x, y)
        return np.asarray(out.data if isinstance(out, ad.Tensor) else out, dtype=np.float64).reshape(-1)

    fake_ok = (scores(xf, yf) < 0).astype(float)

    def acc(x, y):
        real_ok = (scores(x, y) > 0).astype(float)
        return float((real_ok.sum() + fake_ok.sum()) / (len(real_ok) + len(fake_ok)))

    return acc(xt, yt), acc(xh, yh)
