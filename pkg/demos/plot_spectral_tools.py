"""
Singular values, spectral normalization and clamping
====================================================

The discriminator's layers are kept 1-Lipschitz by dividing each weight by an
estimate of its top singular value.  The estimate comes from power iteration
with persistent vectors, one sweep per training step.  This walk-through
compares the estimates against a full SVD.
"""

import numpy as np

from gslab.autodiff import Tensor
from gslab.spectral import (SpectralState, clamp_top_singular, power_iterate, spectral_normalize,
                            top_k_singular)

rng = np.random.default_rng(0)
W = rng.standard_normal((64, 48))
exact = np.linalg.svd(W, compute_uv=False)
print("full SVD, top 4:", np.round(exact[:4], 6))

# Subspace iteration for the top three values.  A fresh state needs many
# sweeps; during training the state persists and one sweep per step suffices.
state = SpectralState.create(W.shape, 3, rng)
for sweeps in (1, 10, 100, 2000):
    est = top_k_singular(W, state, n_iters=sweeps, tol=1e-13)
    print(f"after {sweeps:4d} more sweeps:", np.round(est, 6))

# Spectral normalization divides by the leading estimate.
sn_state = SpectralState.create(W.shape, 1, rng)
power_iterate(W, sn_state, 500)
W_sn = spectral_normalize(Tensor(W), sn_state).data
print("sigma0 after normalization:", np.linalg.svd(W_sn, compute_uv=False)[0])

# Clamping only moves the leading singular value; the rest stay put.
clamped = clamp_top_singular(W, 0.9 * exact[0], SpectralState.create(W.shape, 3, rng))
after = np.linalg.svd(clamped, compute_uv=False)
print("clamped to 0.9 * sigma0:", np.round(after[:4], 6))
