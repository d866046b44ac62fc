import json
import math

import numpy as np
import pytest
from scipy import stats

from rerandomization.asymptotics import AsymptoticModel, build_distribution, sample_region
from rerandomization.criteria import ReG, ReM, ReMT
from rerandomization.errors import CriterionError, DomainError
from rerandomization.inference import (
    arm_estimates,
    confidence_interval,
    confidence_interval_reg,
    difference_in_means,
    estimate_rho_t,
    mixture_quantile,
    neyman_baseline,
    normalize_rho,
)
from rerandomization.population import DesignMatrix, finite_moments, tier_orthogonalize
from rerandomization.sampler import draw_cre, rerandomize
from rerandomization.specialfn import SeededGenerator, chi2_quantile


def linear_population(n, K, r2_signal, seed, effect_sd=0.3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, K))
    beta = np.linspace(1.0, 0.5, K)
    signal = X @ beta
    noise_sd = math.sqrt(signal.var() * (1 - r2_signal) / r2_signal) if r2_signal < 1 else 0.0
    y0 = signal + noise_sd * rng.standard_normal(n)
    y1 = y0 + 1.0 + effect_sd * rng.standard_normal(n)
    return X, y1, y0


def observed(y1, y0, z):
    return np.where(z.z == 1, y1, y0)


# ---------------------------------------------------------------------------
# point estimates


def test_difference_in_means():
    assert difference_in_means([3.0, 1.0, 5.0, 2.0], [1, 0, 1, 0]) == pytest.approx(2.5)
    with pytest.raises(DomainError):
        difference_in_means([1.0, 2.0], [1, 0, 1])
    with pytest.raises(DomainError):
        difference_in_means([1.0, np.nan, 2.0, 3.0], [1, 0, 1, 0])


def test_arm_estimates_match_direct_computation():
    X, y1, y0 = linear_population(60, 3, 0.5, 0)
    z = draw_cre(60, 25, np.random.default_rng(1))
    y = observed(y1, y0, z)
    est = arm_estimates(y, z, DesignMatrix(X))
    t = z.z == 1
    S = np.cov(X, rowvar=False)
    s1 = np.cov(np.column_stack([X[t], y[t]]), rowvar=False)[-1, :-1]
    s0 = np.cov(np.column_stack([X[~t], y[~t]]), rowvar=False)[-1, :-1]
    q = lambda u: u @ np.linalg.solve(S, u)

    def fitted_var(Xa, ya):
        A = np.column_stack([np.ones(len(ya)), Xa])
        return np.var(A @ np.linalg.lstsq(A, ya, rcond=None)[0], ddof=1)

    r1, r0 = 25 / 60, 35 / 60
    vtt = y[t].var(ddof=1) / r1 + y[~t].var(ddof=1) / r0 - q(s1 - s0)
    num = fitted_var(X[t], y[t]) / r1 + fitted_var(X[~t], y[~t]) / r0 - q(s1 - s0)
    assert est.vtt_hat == pytest.approx(vtt, rel=1e-10)
    assert est.r2_raw == pytest.approx(num / vtt, rel=1e-10)
    assert est.tau_hat == pytest.approx(y[t].mean() - y[~t].mean(), rel=1e-12)
    assert np.allclose(est.vtx_hat, s1 / r1 + s0 / r0, rtol=1e-10)


def test_variance_estimate_is_consistent_for_its_conservative_target():
    n = 4000
    X, y1, y0 = linear_population(n, 3, 0.6, 2, effect_sd=1.0)
    pop, V = finite_moments(DesignMatrix(X), y1, y0, r1=0.4)
    target = V.vtt + pop.s2_tau - pop.s2_tau_x
    assert target > V.vtt
    vals = []
    for r in range(20):
        z = draw_cre(n, int(0.4 * n), np.random.default_rng(100 + r))
        vals.append(arm_estimates(observed(y1, y0, z), z, DesignMatrix(X)).vtt_hat)
    assert np.mean(vals) == pytest.approx(target, rel=0.03)


def test_r2_hat_clipped_into_unit_interval():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 3))
    y = rng.normal(size=40)  # unrelated to X
    vals = [arm_estimates(y, draw_cre(40, 12, rng), DesignMatrix(X)) for _ in range(2000)]
    assert any(e.r2_raw < 0 for e in vals)  # rare, but the clip must handle it
    assert all(e.r2_hat == min(max(e.r2_raw, 0.0), 1.0) for e in vals)


def test_constant_covariate_within_an_arm():
    # a binary covariate that happens to be constant among the treated
    X = np.column_stack([np.r_[np.ones(5), np.zeros(3), np.ones(4)], np.arange(12.0)])
    z = np.r_[np.ones(5, int), np.zeros(7, int)]
    y = np.random.default_rng(4).normal(size=12)
    est = arm_estimates(y, z, DesignMatrix(X))
    assert math.isfinite(est.r2_raw) and 0 <= est.r2_hat <= 1


def test_arm_size_checks():
    X = DesignMatrix(np.random.default_rng(0).normal(size=(6, 1)))
    with pytest.raises(DomainError):
        arm_estimates(np.arange(6.0), [1, 0, 0, 0, 0, 0], X)


# ---------------------------------------------------------------------------
# tier shares


def test_normalize_rho():
    rho, r2 = normalize_rho([0.2, -0.1, 0.3], 0.4)
    assert np.allclose(rho, [0.16, 0.0, 0.24]) and r2 == 0.4
    rho, r2 = normalize_rho([-0.2, -0.1], 0.4)
    assert np.all(rho == 0) and r2 == 0.0


def test_estimated_tier_shares_sum_to_one():
    X, y1, y0 = linear_population(300, 4, 0.5, 4)
    D = DesignMatrix(X, tier_sizes=(1, 3))
    z = draw_cre(300, 120, np.random.default_rng(5))
    rho = estimate_rho_t(observed(y1, y0, z), z, tier_orthogonalize(D))
    assert rho.shape == (3,) and np.all(rho >= 0)
    assert rho.sum() == pytest.approx(1.0, abs=1e-12)
    single = estimate_rho_t(observed(y1, y0, z), z, tier_orthogonalize(DesignMatrix(X, tier_sizes=(4,))))
    r2 = arm_estimates(observed(y1, y0, z), z, DesignMatrix(X)).r2_hat
    assert single[0] == pytest.approx(r2, rel=1e-10)


def test_estimated_tier_shares_approach_population_values():
    n = 5000
    X, y1, y0 = linear_population(n, 3, 0.7, 6, effect_sd=0.0)
    D = DesignMatrix(X, tier_sizes=(1, 2))
    b = tier_orthogonalize(D)
    from rerandomization.population import tier_correlations

    pop, _ = finite_moments(D, y1, y0, r1=0.5)
    truth = tier_correlations(b, pop, 0.5)
    z = draw_cre(n, n // 2, np.random.default_rng(7))
    est = estimate_rho_t(observed(y1, y0, z), z, b)
    assert np.allclose(est, truth, atol=0.03)


# ---------------------------------------------------------------------------
# intervals


def test_neyman_baseline():
    rng = np.random.default_rng(8)
    y = rng.normal(size=30)
    z = np.r_[np.ones(12, int), np.zeros(18, int)]
    ci = neyman_baseline(y, z, 0.1)
    var = y[:12].var(ddof=1) / 12 + y[12:].var(ddof=1) / 18
    tau = y[:12].mean() - y[12:].mean()
    assert ci.variance == pytest.approx(var, rel=1e-12)
    assert ci.upper == pytest.approx(tau + stats.norm.ppf(0.95) * math.sqrt(var), rel=1e-12)


def test_cre_interval_is_gaussian():
    X, y1, y0 = linear_population(200, 2, 0.5, 9)
    z = draw_cre(200, 100, np.random.default_rng(9))
    y = observed(y1, y0, z)
    rep = confidence_interval(None, y, z, DesignMatrix(X), alpha=0.05)
    est = arm_estimates(y, z, DesignMatrix(X))
    half = stats.norm.ppf(0.975) * math.sqrt(est.vtt_hat / 200)
    assert rep.upper - rep.tau_hat == pytest.approx(half, rel=1e-12)
    assert rep.nu_se == 0.0 and rep.method == "CRE"


def test_rem_interval_shorter_than_cre_when_covariates_predict():
    X, y1, y0 = linear_population(500, 3, 0.8, 10)
    D = DesignMatrix(X)
    c = ReM.from_probability(0.01, 3)
    z = rerandomize(c, D, 250, SeededGenerator(10)).assignment
    y = observed(y1, y0, z)
    rem = confidence_interval(c, y, z, D, n_mc=200_000)
    cre = confidence_interval(None, y, z, D)
    assert rem.length < 0.7 * cre.length
    assert rem.variance < cre.variance


def test_rem_interval_uses_limit_law_quantile():
    X, y1, y0 = linear_population(400, 2, 0.6, 11)
    D = DesignMatrix(X)
    c = ReM.from_probability(0.05, 2)
    z = rerandomize(c, D, 200, SeededGenerator(11)).assignment
    y = observed(y1, y0, z)
    rep = confidence_interval(c, y, z, D, n_mc=300_000, seed=3)
    est = arm_estimates(y, z, D)
    d = build_distribution(AsymptoticModel.rem(1.0, est.r2_hat, 2, c.a), n_mc=300_000, seed=3)
    assert rep.nu == pytest.approx(d.quantile(0.975), rel=1e-12)
    assert rep.upper - rep.tau_hat == pytest.approx(rep.nu * math.sqrt(est.vtt_hat / 400), rel=1e-12)


def test_zero_r2_gives_exact_normal_quantile():
    m = AsymptoticModel.rem(1.0, 0.0, 3, 1.0)
    assert mixture_quantile(m, 0.975) == (pytest.approx(1.9599639845400542, abs=1e-14), 0.0)


def test_remt_interval_reports_tier_shares():
    X, y1, y0 = linear_population(300, 3, 0.6, 12)
    D = DesignMatrix(X, tier_sizes=(1, 2))
    c = ReMT((chi2_quantile(0.1, 1), chi2_quantile(0.1, 2)))
    z = rerandomize(c, D, 150, SeededGenerator(12)).assignment
    rep = confidence_interval(c, observed(y1, y0, z), z, D, n_mc=100_000)
    assert len(rep.rho2_hat) == 3 and sum(rep.rho2_hat) == pytest.approx(1.0)
    assert sum(rep.rho2_hat[:2]) == pytest.approx(rep.r2_hat)
    with pytest.raises(CriterionError):
        confidence_interval(c, observed(y1, y0, z), z, DesignMatrix(X), n_mc=1000)


def test_interval_is_reproducible_and_serializable():
    X, y1, y0 = linear_population(200, 2, 0.5, 13)
    D = DesignMatrix(X)
    c = ReM(1.0)
    z = rerandomize(c, D, 100, SeededGenerator(13)).assignment
    y = observed(y1, y0, z)
    a = confidence_interval(c, y, z, D, n_mc=50_000, seed=4)
    b = confidence_interval(c, y, z, D, n_mc=50_000, seed=4)
    assert a.lower == b.lower and a.upper == b.upper
    d = json.loads(json.dumps(a.to_dict()))
    assert d["length"] == pytest.approx(a.length) and d["neyman"]["length"] > 0


def test_alpha_validation():
    X, y1, y0 = linear_population(50, 1, 0.5, 14)
    z = draw_cre(50, 25, np.random.default_rng(0))
    for bad in (0.0, 1.0, -0.5):
        with pytest.raises(DomainError):
            confidence_interval(None, observed(y1, y0, z), z, DesignMatrix(X), alpha=bad)


def test_rem_coverage_small_study():
    # repeated rerandomizations of one finite population
    n = 400
    X, y1, y0 = linear_population(n, 2, 0.7, 15)
    D = DesignMatrix(X)
    c = ReM.from_probability(0.05, 2)
    tau = float(np.mean(y1 - y0))
    hits = 0
    reps = 200
    for r in range(reps):
        z = rerandomize(c, D, n // 2, SeededGenerator(15, r)).assignment
        hits += confidence_interval(c, observed(y1, y0, z), z, D, n_mc=100_000, with_se=False).covers(tau)
    assert hits / reps >= 0.95 - 3 * math.sqrt(0.95 * 0.05 / reps)


# ---------------------------------------------------------------------------
# general criteria


def test_reg_ball_interval_close_to_rem():
    X, y1, y0 = linear_population(400, 2, 0.6, 16)
    D = DesignMatrix(X)
    a = chi2_quantile(0.1, 2)
    z = rerandomize(ReM(a), D, 200, SeededGenerator(16)).assignment
    y = observed(y1, y0, z)
    rem = confidence_interval(ReM(a), y, z, D, n_mc=200_000)
    reg = confidence_interval_reg(ReG.mahalanobis_ball(a), y, z, D, n_mc=200_000)
    assert reg.length == pytest.approx(rem.length, rel=0.02)
    assert reg.diagnostics["lambda_argmax"] == pytest.approx(reg.diagnostics["v_eps_hat"])


def test_reg_lambda_search_takes_the_largest_quantile():
    X, y1, y0 = linear_population(300, 2, 0.5, 17)
    D = DesignMatrix(X)
    c = ReG(lambda mu, v: bool(np.all(np.abs(mu) <= 0.8 * np.sqrt(np.diag(v)))), label="box")
    z = draw_cre(300, 150, np.random.default_rng(17))
    y = observed(y1, y0, z)
    vxx = D.cov / 0.25
    region = sample_region(c, vxx, 20_000, SeededGenerator(18))
    rep = confidence_interval_reg(c, y, z, D, lambda_grid_size=9, region=region)
    q = rep.diagnostics["q_grid"]
    assert len(q) == 9 and max(q) * 1.0 == pytest.approx(rep.nu * math.sqrt(rep.vtt_hat))
    assert rep.diagnostics["lambda_grid"][0] == 0.0
    assert rep.diagnostics["lambda_grid"][-1] == pytest.approx(rep.diagnostics["v_eps_hat"])
    with pytest.raises(DomainError):
        confidence_interval_reg(c, y, z, D, lambda_grid_size=1, region=region)
