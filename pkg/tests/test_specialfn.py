import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from rerandomization.errors import DomainError
from rerandomization.specialfn import (
    SeededGenerator,
    as_rng,
    chi2_cdf,
    chi2_isf,
    chi2_pdf,
    chi2_quantile,
    chi2_sf,
    gaussian_cdf,
    gaussian_pdf,
    gaussian_quantile,
    regularized_lower_gamma,
    sample_beta_half,
    sample_trunc_chi,
)

mpmath.mp.dps = 40


def mp_chi2_cdf(x, k):
    s, h = mpmath.mpf(k) / 2, mpmath.mpf(x) / 2
    try:
        return float(mpmath.gammainc(s, 0, h, regularized=True))
    except mpmath.libmp.NoConvergence:
        return float(1 - mpmath.gammainc(s, h, mpmath.inf, regularized=True))


# ---------------------------------------------------------------------------
# seeding


def test_same_seed_and_stream_reproduce():
    a = SeededGenerator(7, 3).rng.random(5)
    b = SeededGenerator(7, 3).rng.random(5)
    assert np.array_equal(a, b)


def test_distinct_streams_differ():
    a = SeededGenerator(7, 0).rng.random(1000)
    b = SeededGenerator(7, 1).rng.random(1000)
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.15


def test_child_streams_are_deterministic():
    g = SeededGenerator(11)
    assert np.array_equal(g.child(2).rng.random(3), SeededGenerator(11).child(2).rng.random(3))
    assert not np.array_equal(g.child(1).rng.random(3), g.child(2).rng.random(3))


def test_as_rng_accepts_several_forms():
    assert isinstance(as_rng(3), np.random.Generator)
    gen = np.random.default_rng(0)
    assert as_rng(gen) is gen
    assert isinstance(as_rng(SeededGenerator(1)), np.random.Generator)


# ---------------------------------------------------------------------------
# chi-square


def test_chi2_cdf_at_zero():
    assert chi2_cdf(0.0, 5) == 0.0


def test_chi2_cdf_table_threshold():
    assert chi2_cdf(0.016, 1) == pytest.approx(0.1, abs=2e-3)


def test_chi2_cdf_matches_quadrature():
    val, _ = integrate.quad(lambda x: stats.chi2.pdf(x, 1), 0, 3.841)
    assert chi2_cdf(3.841, 1) == pytest.approx(val, rel=1e-10)
    assert chi2_cdf(3.841, 1) == pytest.approx(0.95, abs=1e-4)


@pytest.mark.parametrize("k", [1, 2, 3, 5, 10, 15, 30, 100, 1000])
def test_chi2_cdf_relative_error_against_mpmath(k):
    xs = np.concatenate([np.geomspace(1e-4, 1e4, 60), [k - 1.0, k, k + 1.0]])
    xs = xs[xs > 0]
    for x in xs:
        ref = mp_chi2_cdf(x, k)
        if ref < 1e-300:
            continue
        assert chi2_cdf(x, k) == pytest.approx(ref, rel=1e-12, abs=0)


def test_chi2_sf_complements_cdf():
    x = np.linspace(0.1, 40, 50)
    assert np.allclose(chi2_cdf(x, 7) + chi2_sf(x, 7), 1.0, atol=1e-15)


def test_chi2_pdf_matches_scipy():
    x = np.linspace(0.05, 30, 40)
    for k in (1, 2, 5, 12):
        assert np.allclose(chi2_pdf(x, k), stats.chi2.pdf(x, k), rtol=1e-12)


def test_regularized_gamma_against_mpmath():
    for s, x in [(0.5, 0.01), (2.5, 3.0), (40.0, 35.0), (40.0, 80.0), (7.0, 0.1)]:
        ref = float(mpmath.gammainc(s, 0, x, regularized=True))
        assert regularized_lower_gamma(s, x) == pytest.approx(ref, rel=1e-12)


def test_chi2_cdf_domain_errors():
    with pytest.raises(DomainError):
        chi2_cdf(-1.0, 3)
    with pytest.raises(DomainError):
        chi2_cdf(1.0, 0)


def test_chi2_cdf_monotone_in_x_and_k():
    x = np.linspace(0, 50, 500)
    assert np.all(np.diff(chi2_cdf(x, 6)) >= 0)
    ks = np.arange(1, 30)
    vals = np.array([chi2_cdf(4.0, k) for k in ks])
    assert np.all(np.diff(vals) < 0)


@pytest.mark.parametrize(
    "k, expected",
    [(1, 0.015790774093431225), (4, 1.063623216779224), (10, 4.865182051925329)],
)
def test_chi2_quantile_table_thresholds(k, expected):
    # reference values from mpmath root finding
    assert chi2_quantile(0.1, k) == pytest.approx(expected, abs=1e-10)


def test_chi2_quantile_median_two_df():
    assert chi2_quantile(0.5, 2) == pytest.approx(2 * math.log(2), abs=1e-12)


@pytest.mark.parametrize("k", [1, 3, 10, 50, 300])
def test_chi2_quantile_matches_scipy(k):
    p = np.array([1e-12, 1e-6, 1e-3, 0.01, 0.1, 0.5, 0.9, 0.999, 1 - 1e-9])
    assert np.allclose(chi2_quantile(p, k), stats.chi2.ppf(p, k), rtol=1e-10, atol=1e-10)


def test_chi2_inverse_roundtrip_on_grid():
    # each point goes through the tail whose probability is well conditioned
    xs = np.geomspace(1e-4, 100, 40)
    for k in range(1, 31):
        p, q = chi2_cdf(xs, k), chi2_sf(xs, k)
        low = p <= 0.5
        back = np.where(low, chi2_quantile(np.where(low, p, 0.5), k), chi2_isf(np.where(low, 0.5, q), k))
        assert np.allclose(back, xs, rtol=1e-8, atol=1e-8)


@pytest.mark.parametrize("k", [1, 2, 7, 30, 250])
def test_chi2_isf_matches_scipy(k):
    q = np.array([1e-200, 1e-30, 1e-10, 1e-3, 0.2, 0.5, 0.8, 0.999])
    assert np.allclose(chi2_isf(q, k), stats.chi2.isf(q, k), rtol=1e-10, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(p=st.floats(1e-10, 1 - 1e-10), k=st.integers(1, 200))
def test_chi2_quantile_cdf_roundtrip(p, k):
    x = chi2_quantile(p, k)
    assert abs(chi2_cdf(x, k) - p) <= 1e-10


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_chi2_quantile_domain(p):
    with pytest.raises(DomainError):
        chi2_quantile(p, 3)


# ---------------------------------------------------------------------------
# Gaussian


def test_gaussian_cdf_center():
    assert gaussian_cdf(0.0) == 0.5


def test_gaussian_quantile_reference():
    # sqrt(2) * erfinv(0.95) at 40 digits
    assert gaussian_quantile(0.975) == pytest.approx(1.9599639845400542, abs=1e-13)


def test_gaussian_inverse_pair():
    assert gaussian_quantile(gaussian_cdf(1.3)) == pytest.approx(1.3, abs=1e-9)


def test_gaussian_cdf_against_mpmath():
    x = np.linspace(-37, 8, 451)
    ref = np.array([float(mpmath.ncdf(mpmath.mpf(float(v)))) for v in x])
    rel = np.abs(gaussian_cdf(x) / ref - 1)
    assert rel[np.abs(x) <= 3].max() <= 1e-14
    # far tail: rounding x / sqrt(2) alone costs about x^2 ulps
    assert np.all(rel <= 1e-15 * np.maximum(1.0, x**2))
    assert np.allclose(gaussian_pdf(x), stats.norm.pdf(x), rtol=1e-13, atol=0)


def test_gaussian_quantile_matches_scipy():
    p = np.concatenate([np.geomspace(1e-300, 0.5, 200), 1 - np.geomspace(1e-15, 0.5, 100)])
    assert np.allclose(gaussian_quantile(p), stats.norm.ppf(p), rtol=1e-12, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-37, 0))
def test_gaussian_roundtrip_property(x):
    # lower tail, where the probability carries full relative precision
    assert abs(gaussian_quantile(gaussian_cdf(x)) - x) <= 1e-10 * max(1.0, abs(x))


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 0.5))
def test_gaussian_quantile_symmetry(p):
    q = 1.0 - p
    assert gaussian_quantile(q) == pytest.approx(-gaussian_quantile(1.0 - q), abs=1e-10)


def test_gaussian_quantile_domain():
    with pytest.raises(DomainError):
        gaussian_quantile(1.0)


# ---------------------------------------------------------------------------
# samplers


def test_trunc_chi_support():
    d = sample_trunc_chi(4, 0.3, SeededGenerator(1), 100_000)
    assert np.all(d > 0) and np.all(d <= math.sqrt(0.3))


def test_trunc_chi_mean_matches_quadrature():
    # E[chi_2 | chi_2^2 <= 1] by mpmath quadrature
    ref = 0.63307024633124439
    d = sample_trunc_chi(2, 1.0, SeededGenerator(2), 1_000_000)
    se = d.std() / math.sqrt(d.size)
    assert abs(d.mean() - ref) < 3 * se


def test_trunc_chi_large_threshold_recovers_chi2_mean():
    d = sample_trunc_chi(3, 1e6, SeededGenerator(3), 400_000)
    assert np.mean(d**2) == pytest.approx(3.0, rel=0.01)


def test_trunc_chi_distribution_ks():
    k, a = 5, 2.0
    d2 = sample_trunc_chi(k, a, SeededGenerator(4), 50_000) ** 2
    cdf = lambda x: stats.chi2.cdf(x, k) / stats.chi2.cdf(a, k)
    assert stats.kstest(d2, cdf).pvalue > 1e-3


def test_trunc_chi_bitwise_reproducible():
    a = sample_trunc_chi(3, 0.5, SeededGenerator(9, 4), 1000)
    b = sample_trunc_chi(3, 0.5, SeededGenerator(9, 4), 1000)
    assert np.array_equal(a, b)


def test_trunc_chi_domain():
    with pytest.raises(DomainError):
        sample_trunc_chi(3, 0.0, SeededGenerator(0))


def test_beta_half_k1_is_one():
    assert np.all(sample_beta_half(1, SeededGenerator(0), 100) == 1.0)


def test_beta_half_mean_and_support():
    b = sample_beta_half(3, SeededGenerator(5), 1_000_000)
    assert np.all((b >= 0) & (b <= 1))
    se = b.std() / math.sqrt(b.size)
    assert abs(b.mean() - 1 / 3) < 3 * se


def test_beta_half_distribution():
    b = sample_beta_half(6, SeededGenerator(6), 50_000)
    assert stats.kstest(b, stats.beta(0.5, 2.5).cdf).pvalue > 1e-3
