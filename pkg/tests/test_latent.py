import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gslab.latent import (KINDS, MIN_THRESHOLD, LatentSpec, Stream, anneal_sigma, make_rng, per_sample_sigma,
                          rng_from_state_array, rng_state_array, sample, sample_truncated, truncated_normal)

N = 10**6


def phi(x):
    return math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def Phi(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


def truncnorm_var(t):
    """Variance of N(0,1) conditioned on |z| <= t (symmetric two-sided truncation)."""
    return 1 - 2 * t * phi(t) / (Phi(t) - Phi(-t))


def binomial_bound(p, n, k=3.0):
    return k * math.sqrt(p * (1 - p) / n)


def test_closed_form_helper_is_sane():
    assert truncnorm_var(1.0) == pytest.approx(1 - 2 * phi(1.0) / (Phi(1.0) - Phi(-1.0)))
    assert truncnorm_var(40.0) == pytest.approx(1.0)


@pytest.mark.parametrize("t", [10.0, 1.0])
def test_truncated_variance_matches_closed_form(t):
    z = truncated_normal((N,), t, make_rng(0, Stream.LATENT))
    assert abs(z.var() - truncnorm_var(t)) <= 0.005
    assert np.abs(z).max() <= t


def test_truncated_threshold_bounds_every_coordinate():
    z = sample_truncated(LatentSpec(dim=16), 0.5, 1000, make_rng(1)).data
    assert np.abs(z).max() <= 0.5


def test_truncated_rejects_tiny_threshold():
    with pytest.raises(ValueError):
        truncated_normal((10,), MIN_THRESHOLD / 2, make_rng(0))
    with pytest.raises(ValueError):
        sample_truncated(LatentSpec(kind="uniform"), 1.0, 4, make_rng(0))


def test_truncation_variance_is_monotone_in_threshold():
    rng = make_rng(3, Stream.EVAL)
    n = 2 * 10**5
    variances = []
    for t in (2.0, 1.0, 0.5, 0.04):
        z = truncated_normal((n,), t, rng)
        variances.append((z.var(), np.sqrt(2.0 / (n - 1)) * z.var()))
    for (v_hi, se_hi), (v_lo, se_lo) in zip(variances, variances[1:]):
        assert v_hi - v_lo > 3 * math.hypot(se_hi, se_lo)


def test_vector_mode_bounds_rows():
    z = truncated_normal((500, 4), 1.5, make_rng(0), mode="vector")
    assert np.abs(z).max() <= 1.5


def test_bernoulli01_mean():
    z = sample(LatentSpec(dim=1, kind="bernoulli01"), N, make_rng(0)).data
    assert set(np.unique(z)) == {0.0, 1.0}
    assert abs(z.mean() - 0.5) <= min(0.002, binomial_bound(0.5, N))


def test_censored_normal_mean():
    z = sample(LatentSpec(dim=1, kind="censored_normal"), N, make_rng(1)).data
    assert z.min() == 0.0
    assert abs(z.mean() - 1 / math.sqrt(2 * math.pi)) <= 0.002


def test_categorical3_support_and_frequencies():
    z = sample(LatentSpec(dim=1, kind="categorical3"), N, make_rng(2)).data
    vals, counts = np.unique(z, return_counts=True)
    assert list(vals) == [-1.0, 0.0, 1.0]
    bound = min(0.002, binomial_bound(1 / 3, N))
    assert np.all(np.abs(counts / N - 1 / 3) <= bound)


def test_bernoulli_pm1_frequencies():
    z = sample(LatentSpec(dim=1, kind="bernoulli_pm1"), N, make_rng(3)).data
    assert set(np.unique(z)) == {-1.0, 1.0}
    assert abs((z > 0).mean() - 0.5) <= binomial_bound(0.5, N)


def test_concat_kind_layout():
    z = sample(LatentSpec(dim=8, kind="concat_gaussian_bernoulli"), 2000, make_rng(4)).data
    assert set(np.unique(z[:, 4:])) == {0.0, 1.0}
    assert len(np.unique(z[:, :4])) == z[:, :4].size
    with pytest.raises(ValueError):
        LatentSpec(dim=7, kind="concat_gaussian_bernoulli")


def test_gaussian_times_bernoulli_zero_fraction():
    z = sample(LatentSpec(dim=1, kind="gaussian_times_bernoulli"), N, make_rng(5)).data
    assert abs((z == 0).mean() - 0.5) <= binomial_bound(0.5, N)


def test_uniform_range():
    z = sample(LatentSpec(dim=3, kind="uniform"), 10000, make_rng(6)).data
    assert z.min() >= -1 and z.max() <= 1


def test_anneal_schedule():
    knots = ((0, 2.0), (100, 1.0))
    assert anneal_sigma(knots, 0) == 2.0
    assert anneal_sigma(knots, 50) == 1.5
    assert anneal_sigma(knots, 200) == 1.0
    with pytest.raises(ValueError):
        anneal_sigma((), 0)


def test_variance_annealed_scales_draws():
    spec = LatentSpec(dim=1, kind="variance_annealed", schedule=((0, 2.0), (100, 1.0)))
    z = sample(spec, 10**5, make_rng(7), step=0).data
    assert z.std() == pytest.approx(2.0, rel=0.02)


def test_per_sample_sigma():
    np.testing.assert_array_equal(per_sample_sigma(1.0, 1.0, 5, make_rng(0)), np.ones(5))
    s = per_sample_sigma(0.5, 1.5, N, make_rng(8))
    assert abs(s.mean() - 1.0) <= 0.002
    assert s.min() >= 0.5 and s.max() <= 1.5
    with pytest.raises(ValueError):
        per_sample_sigma(2.0, 1.0, 3, make_rng(0))


def test_spec_validation():
    with pytest.raises(ValueError):
        LatentSpec(kind="laplace")
    with pytest.raises(ValueError):
        LatentSpec(kind="uniform", truncation=1.0)
    with pytest.raises(ValueError):
        LatentSpec(truncation=-1.0)
    with pytest.raises(ValueError):
        sample(LatentSpec(), 0, make_rng(0))


@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_gives_identical_samples(kind):
    spec = LatentSpec(dim=4, kind=kind)
    a = sample(spec, 64, make_rng(11, Stream.LATENT)).data
    b = sample(spec, 64, make_rng(11, Stream.LATENT)).data
    assert a.tobytes() == b.tobytes()


def test_streams_are_independent():
    a = make_rng(5, Stream.DATA).standard_normal(8)
    b = make_rng(5, Stream.LATENT).standard_normal(8)
    assert not np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63), st.integers(0, 50))
def test_rng_state_round_trip(seed, burn):
    rng = make_rng(seed, Stream.TELEMETRY)
    rng.standard_normal(burn)
    rng.random()  # leave the buffer part-way used
    clone = rng_from_state_array(rng_state_array(rng))
    assert np.array_equal(rng.standard_normal(7), clone.standard_normal(7))
