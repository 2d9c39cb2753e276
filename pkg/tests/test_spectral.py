import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gslab.autodiff import Tensor
from gslab.spectral import (SpectralError, SpectralState, clamp_top_singular, ortho_penalty, power_iterate,
                            sigma_regularization_loss, spectral_normalize, top_k_singular)

from oracles import jacobi_svd, numeric_grad, rel_err, singular_values


def random_with_gap(rng, m, n, gap=1e-2):
    """Random matrix whose top four singular values are separated by at least ``gap``."""
    while True:
        A = rng.standard_normal((m, n))
        s = singular_values(A)
        if np.all(-np.diff(s[:4]) > gap * s[0]):
            return A


def state_for(W, k=1, seed=0):
    return SpectralState.create(np.shape(W), k, np.random.default_rng(seed))


# -- power iteration ---------------------------------------------------------

def test_power_iterate_diag_and_identity():
    st_ = SpectralState(u=np.array([[1.0], [1.0]]) / np.sqrt(2), v=np.array([[1.0], [0.5]]) / np.sqrt(1.25))
    s, _ = power_iterate(np.diag([3.0, 1.0]), st_, 100)
    assert s == pytest.approx(3.0, abs=1e-12)
    s, _ = power_iterate(np.eye(4), state_for(np.eye(4)), 1)
    assert s == pytest.approx(1.0, abs=1e-12)


def test_power_iterate_random_16_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        W = random_with_gap(rng, 16, 16, gap=0.05)
        s, state = power_iterate(W, state_for(W), 100)
        assert abs(s - singular_values(W)[0]) / singular_values(W)[0] <= 1e-6
        assert np.linalg.norm(state.u[:, 0]) == pytest.approx(1.0, abs=1e-9)
        assert np.linalg.norm(state.v[:, 0]) == pytest.approx(1.0, abs=1e-9)


def test_power_iterate_zero_matrix_is_flagged():
    state = state_for(np.zeros((3, 3)))
    u_before = state.u.copy()
    s, state = power_iterate(np.zeros((3, 3)), state, 5)
    assert s == 0.0 and state.degenerate
    np.testing.assert_array_equal(state.u, u_before)


def test_power_iterate_reconverges_after_small_perturbation():
    rng = np.random.default_rng(1)
    for _ in range(10):
        W = random_with_gap(rng, 24, 16, gap=0.05)
        state = state_for(W)
        power_iterate(W, state, 200)
        dW = rng.standard_normal(W.shape)
        W2 = W + 0.01 * np.linalg.norm(W) * dW / np.linalg.norm(dW)
        s, _ = power_iterate(W2, state, 5)
        true = singular_values(W2)[0]
        assert abs(s - true) / true <= 1e-4


# -- subspace iteration -------------------------------------------------------

def test_top_k_examples():
    s = top_k_singular(np.diag([5.0, 2.0, 1.0]), state_for(np.eye(3), 3), n_iters=100)
    np.testing.assert_allclose(s, [5.0, 2.0, 1.0], atol=1e-9)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(6)
    v = rng.standard_normal(4)
    W = 4.0 * np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
    np.testing.assert_allclose(top_k_singular(W, state_for(W, 3), n_iters=100), [4.0, 0.0, 0.0], atol=1e-9)


def test_top_k_random_32_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        W = random_with_gap(rng, 32, 32)
        est = top_k_singular(W, state_for(W, 3), n_iters=100)
        np.testing.assert_allclose(est, singular_values(W)[:3], rtol=1e-4)
        assert np.all(np.diff(est) <= 0)


def test_top_k_rejects_oversized_k():
    with pytest.raises(SpectralError):
        SpectralState.create((2, 5), 3)
    with pytest.raises(SpectralError):
        top_k_singular(np.ones((2, 5)), state_for(np.ones((2, 5)), 2), k=3)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.integers(0, 2**31 - 1))
def test_top_k_estimates_are_sorted_and_vectors_unit(m, n, seed):
    W = np.random.default_rng(seed).standard_normal((m, n))
    state = state_for(W, 3, seed)
    est = top_k_singular(W, state, n_iters=3)
    assert np.all(np.diff(est) <= 0) and np.all(est >= 0)
    np.testing.assert_allclose(np.linalg.norm(state.u, axis=0), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(state.v, axis=0), 1.0, atol=1e-9)


# -- spectral normalization ---------------------------------------------------

def test_spectral_normalize_examples():
    W = 2.0 * np.eye(3)
    state = state_for(W)
    power_iterate(W, state, 10)
    out = spectral_normalize(Tensor(W), state)
    assert singular_values(out.data)[0] == pytest.approx(1.0, abs=1e-3)
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))[0]
    state = state_for(Q)
    power_iterate(Q, state, 10)
    np.testing.assert_allclose(spectral_normalize(Tensor(Q), state).data, Q, atol=2e-4)


def test_spectral_normalize_random_within_1e3():
    rng = np.random.default_rng(3)
    for _ in range(10):
        W = rng.standard_normal((12, 9)) * rng.uniform(0.1, 10)
        state = state_for(W)
        power_iterate(W, state, 200)
        s = singular_values(spectral_normalize(Tensor(W), state).data)[0]
        assert 1 - 1e-3 <= s <= 1 + 1e-3


def test_spectral_normalize_divisor_is_constant_in_backward():
    W = Tensor(np.diag([3.0, 1.0]), requires_grad=True)
    state = state_for(W.data)
    power_iterate(W.data, state, 50)
    spectral_normalize(W, state).sum().backward()
    np.testing.assert_allclose(W.grad, np.full((2, 2), 1.0 / (3.0 + 1e-4)))


def test_spectral_normalize_rejects_nonfinite_sigma():
    state = state_for(np.eye(2))
    state.sigma[0] = np.nan
    with pytest.raises(SpectralError):
        spectral_normalize(Tensor(np.eye(2)), state)


# -- clamping -----------------------------------------------------------------

def test_clamp_examples():
    st3 = state_for(np.eye(3), 3)
    np.testing.assert_allclose(clamp_top_singular(np.diag([5.0, 2.0, 1.0]), 3.0, st3), np.diag([3.0, 2.0, 1.0]),
                               atol=1e-9)
    W = np.diag([2.0, 1.0])
    np.testing.assert_array_equal(clamp_top_singular(W, 3.0, state_for(W, 2)), W)


def test_clamp_random_matches_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        W = random_with_gap(rng, 8, 8, gap=0.02)
        s = singular_values(W)
        c = 0.5 * (s[0] + s[1])  # above sigma_1, so only the top value moves
        out = clamp_top_singular(W, c, state_for(W, 3))
        s2 = singular_values(out)
        assert abs(s2[0] - min(s[0], c)) <= 1e-6
        assert np.max(np.abs(s2[1:] - s[1:])) <= 1e-6


def test_clamp_is_idempotent():
    rng = np.random.default_rng(5)
    W = random_with_gap(rng, 10, 6)
    c = 0.9 * singular_values(W)[0]
    once = clamp_top_singular(W, c, state_for(W, 2))
    twice = clamp_top_singular(once, c, state_for(W, 2, seed=1))
    assert np.max(np.abs(once - twice)) <= 1e-9


def test_clamp_rejects_bad_input():
    with pytest.raises(SpectralError):
        clamp_top_singular(np.eye(2), 0.0, state_for(np.eye(2)))
    with pytest.raises(SpectralError):
        clamp_top_singular(np.array([[np.inf, 0.0], [0.0, 1.0]]), 1.0, state_for(np.eye(2)))


# -- sigma regularization -----------------------------------------------------

def _converged(W, k):
    state = state_for(W, k)
    top_k_singular(W, state, n_iters=500, tol=1e-14)
    return state


def test_sigma_reg_zero_at_target():
    W = np.diag([4.0, 2.0])
    assert sigma_regularization_loss(Tensor(W), "fixed", 4.0, _converged(W, 1)).item() == pytest.approx(0.0, abs=1e-20)


def test_sigma_reg_ratio_example():
    W = Tensor(np.diag([4.0, 2.0]), requires_grad=True)
    loss = sigma_regularization_loss(W, "ratio", 1.0, _converged(W.data, 2))
    assert loss.item() == pytest.approx(4.0, abs=1e-12)
    loss.backward()
    # d/dW (sigma0 - 2)^2 = 2 (sigma0 - 2) u0 v0^T, touching only the top direction
    np.testing.assert_allclose(np.abs(W.grad), [[4.0, 0.0], [0.0, 0.0]], atol=1e-12)


def test_sigma_reg_ratio_needs_two_vectors():
    with pytest.raises(SpectralError):
        sigma_regularization_loss(Tensor(np.eye(2)), "ratio", 1.0, state_for(np.eye(2), 1))


@pytest.mark.parametrize("mode", ["fixed", "ratio"])
def test_sigma_reg_gradient_matches_finite_differences(mode):
    """Finite differences of (sigma0(W) - t)^2 with sigma1 frozen, sigma0 exact."""
    rng = np.random.default_rng(6)
    for _ in range(20):
        W0 = random_with_gap(rng, 5, 4, gap=0.05)
        state = _converged(W0, 2)
        t_const = 0.7 if mode == "fixed" else 0.7 * state.sigma[1]
        Wt = Tensor(W0.copy(), requires_grad=True)
        sigma_regularization_loss(Wt, mode, 0.7, state).backward()
        num = numeric_grad(lambda W: (singular_values(W)[0] - t_const) ** 2, W0)
        assert rel_err(Wt.grad, num) <= 1e-4


# -- orthogonal regularization ----------------------------------------------

def test_ortho_examples():
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 4)))[0]
    for variant in ("full", "offdiag"):
        assert ortho_penalty(Tensor(Q), variant, 1e-4).item() == pytest.approx(0.0, abs=1e-18)
    W = Tensor(2.0 * np.eye(2))
    assert ortho_penalty(W, "offdiag", 1e-4).item() == 0.0
    assert ortho_penalty(W, "full", 1e-4).item() == pytest.approx(18e-4, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
def test_offdiag_ignores_column_scale(c, seed):
    Q = np.linalg.qr(np.random.default_rng(seed).standard_normal((5, 5)))[0]
    val = ortho_penalty(Tensor(c * Q), "offdiag", 1.0).item()
    assert val <= 1e-20 * max(1.0, c ** 4)


@pytest.mark.parametrize("variant", ["full", "offdiag"])
def test_ortho_gradient_matches_finite_differences(variant):
    rng = np.random.default_rng(7)
    for _ in range(20):
        W0 = rng.uniform(-1, 1, size=(6, 4))
        Wt = Tensor(W0.copy(), requires_grad=True)
        ortho_penalty(Wt, variant, 0.3).backward()
        num = numeric_grad(lambda W: ortho_penalty(Tensor(W), variant, 0.3).item(), W0)
        assert rel_err(Wt.grad, num) <= 1e-6


def test_ortho_rejects_bad_input():
    with pytest.raises(SpectralError):
        ortho_penalty(Tensor(np.eye(2)), "full", -1.0)
    with pytest.raises(SpectralError):
        ortho_penalty(Tensor(np.full((2, 2), np.nan)), "full")
    with pytest.raises(SpectralError):
        ortho_penalty(Tensor(np.eye(2)), "cosine")


def test_jacobi_oracle_reconstructs():
    A = np.random.default_rng(8).standard_normal((7, 5))
    U, s, V = jacobi_svd(A)
    np.testing.assert_allclose(U * s @ V.T, A, atol=1e-12)
