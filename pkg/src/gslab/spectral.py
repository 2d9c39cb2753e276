"""Singular-value tracking, spectral normalization, clamping and orthogonality penalties.

Convention: a weight ``W`` of shape (m, n) has ``W v = sigma u`` for its
singular triplets, so the left vectors ``u`` live in R^m and the right
vectors ``v`` in R^n.  Estimates persist across training steps inside a
:class:`SpectralState`, so one sweep per step is enough to keep tracking a
slowly-moving weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, primitive, reduce_sum, square

SN_EPS = 1e-4
DEFAULT_ORTHO_BETA = 1e-4


class SpectralError(ValueError):
    """Bad input to a spectral operation (non-finite values, k out of range)."""


@dataclass
class SpectralState:
    """Persistent left/right singular-vector estimates for one weight."""

    u: np.ndarray  # (m, k), orthonormal columns
    v: np.ndarray  # (n, k), orthonormal columns
    sigma: np.ndarray = field(default=None)  # (k,), non-increasing
    degenerate: bool = False

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = np.zeros(self.k)

    @property
    def k(self) -> int:
        return self.u.shape[1]

    @classmethod
    def create(cls, shape: tuple, k: int = 1, rng: Optional[np.random.Generator] = None) -> "SpectralState":
        m, n = shape
        if not 1 <= k <= min(3, m, n):
            raise SpectralError(f"k={k} must lie in 1..min(3, {m}, {n})")
        rng = rng if rng is not None else np.random.default_rng(0)
        u, _ = np.linalg.qr(rng.standard_normal((m, k)))
        v, _ = np.linalg.qr(rng.standard_normal((n, k)))
        return cls(u=u, v=v)

    def copy(self) -> "SpectralState":
        return SpectralState(self.u.copy(), self.v.copy(), self.sigma.copy(), self.degenerate)

    @property
    def sigma0(self) -> float:
        return float(self.sigma[0])


def _as_matrix(W) -> np.ndarray:
    W = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise SpectralError(f"expected a 2-D weight, got shape {W.shape}")
    return W


def power_iterate(W, state: SpectralState, n_iters: int = 1) -> tuple:
    """Refine the leading singular pair of ``W`` in place.

    Each iteration does ``u <- normalize(W v)``, ``v <- normalize(W^T u)``
    on the first column of the state.  Returns ``(sigma0, state)`` with
    ``sigma0 = u^T W v``.  A zero matrix yields 0 and sets
    ``state.degenerate`` without touching the stored vectors.
    """
    W = _as_matrix(W)
    if not np.all(np.isfinite(W)):
        raise SpectralError("power_iterate: weight has non-finite entries")
    u = state.u[:, 0]
    v = state.v[:, 0]
    state.degenerate = False
    for _ in range(n_iters):
        wu = W @ v
        nu = np.linalg.norm(wu)
        if nu == 0.0:
            state.degenerate = True
            state.sigma[0] = 0.0
            return 0.0, state
        u = wu / nu
        wv = W.T @ u
        nv = np.linalg.norm(wv)
        if nv == 0.0:
            state.degenerate = True
            state.sigma[0] = 0.0
            return 0.0, state
        v = wv / nv
    state.u[:, 0] = u
    state.v[:, 0] = v
    sigma0 = float(u @ W @ v)
    state.sigma[0] = sigma0
    return sigma0, state


def top_k_singular(W, state: SpectralState, k: Optional[int] = None, n_iters: int = 1,
                   tol: float = 1e-7) -> np.ndarray:
    """Estimate the top ``k`` singular values by blocked subspace iteration.

    Each sweep forms ``U = qr(W V)``, ``V = qr(W^T U)`` and then rotates both
    bases by the SVD of the small projected matrix ``U^T W V`` so that the
    columns line up with individual singular vectors.  Iteration stops after
    ``n_iters`` sweeps or once every estimate changes by less than ``tol``
    relative.
    """
    W = _as_matrix(W)
    k = state.k if k is None else k
    if k > min(W.shape) or k > 3 or k < 1:
        raise SpectralError(f"k={k} exceeds allowed range for shape {W.shape}")
    if k != state.k:
        raise SpectralError(f"state tracks {state.k} vectors, asked for {k}")
    if not np.all(np.isfinite(W)):
        raise SpectralError("top_k_singular: weight has non-finite entries")
    U, V = state.u, state.v
    prev = state.sigma.copy()
    sig = prev
    for _ in range(n_iters):
        U, _ = np.linalg.qr(W @ V)
        V, _ = np.linalg.qr(W.T @ U)
        small = U.T @ W @ V
        a, sig, bt = np.linalg.svd(small)
        U = U @ a
        V = V @ bt.T
        scale = max(float(sig[0]), np.finfo(float).tiny)
        if np.all(np.abs(sig - prev) <= tol * scale):
            break
        prev = sig
    state.u, state.v = U, V
    state.sigma = np.maximum(sig, 0.0)
    state.degenerate = bool(state.sigma[0] == 0.0)
    return state.sigma.copy()


def spectral_normalize(W: Tensor, state: SpectralState, eps: float = SN_EPS) -> Tensor:
    """``W / (sigma0 + eps)`` with the divisor held constant for backprop."""
    s = float(state.sigma[0])
    if not np.isfinite(s):
        raise SpectralError("spectral_normalize: sigma estimate is not finite")
    return W * (1.0 / (s + eps))


def clamp_top_singular(W, sigma_clamp: float, state: SpectralState, n_iters: int = 500,
                       tol: float = 1e-12) -> np.ndarray:
    """Return ``W - max(0, sigma0 - sigma_clamp) u0 v0^T``.

    The state is first driven to convergence, since an inexact ``(u0, v0)``
    would leak into the other singular directions.  Only the leading value
    is touched; it should exceed ``sigma_1`` for the result's spectral norm
    to equal ``min(sigma0, sigma_clamp)``.
    """
    if sigma_clamp <= 0:
        raise SpectralError("sigma_clamp must be positive")
    W = _as_matrix(W)
    if not np.all(np.isfinite(W)):
        raise SpectralError("clamp_top_singular: weight has non-finite entries")
    top_k_singular(W, state, n_iters=n_iters, tol=tol)
    excess = max(0.0, float(state.sigma[0]) - sigma_clamp)
    if excess == 0.0:
        return W.copy()
    u0, v0 = state.u[:, 0], state.v[:, 0]
    state.sigma[0] = sigma_clamp
    return W - excess * np.outer(u0, v0)


def sigma_regularization_loss(W: Tensor, mode: str, target: float, state: SpectralState) -> Tensor:
    """``(sigma0 - t)^2`` pulling the top singular value toward a target.

    ``sigma0`` is expressed as ``u0^T W v0`` with the tracked vectors held
    fixed, which has the exact derivative of the singular value at
    convergence.  ``mode='fixed'`` uses ``t = target``; ``mode='ratio'``
    uses ``t = target * sigma1`` with ``sigma1`` as a constant.
    """
    if mode == "fixed":
        t = float(target)
    elif mode == "ratio":
        if state.k < 2:
            raise SpectralError("ratio mode needs a state tracking at least 2 singular values")
        t = float(target) * float(state.sigma[1])
    else:
        raise SpectralError(f"unknown sigma regularization mode {mode!r}")
    u0 = Tensor(state.u[:, :1].T.copy())
    v0 = Tensor(state.v[:, :1].copy())
    sigma0 = reduce_sum(u0 @ W @ v0)
    return square(sigma0 - t)


def ortho_penalty(W: Tensor, variant: str = "offdiag", beta: float = DEFAULT_ORTHO_BETA) -> Tensor:
    """Orthogonality penalty on the columns (filters) of ``W``.

    ``full``: ``beta * ||W^T W - I||_F^2``.
    ``offdiag``: ``beta * ||W^T W * (1 - I)||_F^2``, which ignores column norms.
    """
    if beta < 0:
        raise SpectralError("beta must be non-negative")
    if not np.all(np.isfinite(W.data)):
        raise SpectralError("ortho_penalty: weight has non-finite entries")
    if variant not in ("full", "offdiag"):
        raise SpectralError(f"unknown ortho variant {variant!r}")
    R = _ortho_resid(W.data, variant)
    Wd = W.data
    # d/dW ||R||^2 with R = mask(W^T W) is 4 W R for both variants (R is symmetric)
    out = primitive(f"ortho_{variant}", (W,), np.sum(R * R), lambda g: (4.0 * g * (Wd @ R),))
    return out * float(beta)


def _ortho_resid(W: np.ndarray, variant: str) -> np.ndarray:
    gram = W.T @ W
    if variant == "full":
        gram[np.diag_indices_from(gram)] -= 1.0
    else:
        gram[np.diag_indices_from(gram)] = 0.0
    return gram
