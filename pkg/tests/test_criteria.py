import math

import numpy as np
import pytest
from scipy import stats

from oracles import all_assignments, mahalanobis_direct
from rerandomization.criteria import (
    ReG,
    ReM,
    ReMT,
    accept,
    any_imbalance_probability,
    criterion_from_config,
    mahalanobis,
    thresholds_from_probability,
    tier_distances,
)
from rerandomization.errors import ConfigError, CriterionError, DomainError
from rerandomization.population import Assignment, DesignMatrix, tier_orthogonalize

TOY = DesignMatrix(np.array([1.0, 2.0, 3.0, 4.0]))
# first three rows mirror the last three, so z = (1,1,1,0,0,0) is exactly balanced
BALANCED = np.array([[1.0, 5.0], [2.0, 1.0], [3.0, 2.0], [3.0, 2.0], [2.0, 1.0], [1.0, 5.0]])


def test_toy_mahalanobis_values():
    # hand arithmetic: (n1 n0 / n) * tau_x^2 / S^2 with S^2 = 5/3
    assert mahalanobis(TOY, Assignment([1, 1, 0, 0])) == pytest.approx(2.4, abs=1e-12)
    assert mahalanobis(TOY, Assignment([1, 0, 0, 1])) == pytest.approx(0.0, abs=1e-15)
    assert mahalanobis(TOY, Assignment([1, 0, 1, 0])) == pytest.approx(0.6, abs=1e-12)


def test_mahalanobis_matches_direct_formula():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(15, 3))
    d = DesignMatrix(X)
    for z in all_assignments(15, 6)[::97]:
        assert mahalanobis(d, Assignment(z)) == pytest.approx(mahalanobis_direct(X, z), rel=1e-10)


def test_mahalanobis_label_symmetry_and_linear_invariance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 3))
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    z = Assignment(np.r_[np.ones(8, int), np.zeros(12, int)][rng.permutation(20)])
    m = mahalanobis(DesignMatrix(X), z)
    assert mahalanobis(DesignMatrix(X), z.flipped()) == pytest.approx(m, rel=1e-12)
    assert mahalanobis(DesignMatrix(X @ A.T + 7.0), z) == pytest.approx(m, rel=1e-8)


def test_tier_distances():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(12, 3))
    z = Assignment([1, 0] * 6)
    single = tier_orthogonalize(DesignMatrix(X, tier_sizes=(3,)))
    assert tier_distances(single, z)[0] == pytest.approx(mahalanobis(DesignMatrix(X), z), rel=1e-12)
    b = tier_orthogonalize(DesignMatrix(X, tier_sizes=(1, 2)))
    # orthogonalized tiers split the overall distance exactly
    assert sum(tier_distances(b, z)) == pytest.approx(mahalanobis(DesignMatrix(X), z), rel=1e-10)


def test_tier_distances_zero_for_balanced_assignment():
    b = tier_orthogonalize(DesignMatrix(BALANCED, tier_sizes=(1, 1)))
    assert np.allclose(tier_distances(b, Assignment([1, 1, 1, 0, 0, 0])), 0.0, atol=1e-14)


def test_thresholds_from_probability_table():
    a = thresholds_from_probability(0.001, (1, 4, 10))
    assert [round(x, 3) for x in a] == [0.016, 1.064, 4.865]


def test_single_tier_threshold_is_chi2_quantile():
    (a,) = thresholds_from_probability(0.5, (2,))
    assert a == pytest.approx(stats.chi2.ppf(0.5, 2), rel=1e-12)


def test_unit_probability_gives_infinite_threshold():
    assert thresholds_from_probability(1.0, (3,)) == (math.inf,)


def test_custom_split_must_multiply_to_p_a():
    a = thresholds_from_probability(0.01, (1, 2), split=(0.5, 0.02))
    assert a[0] == pytest.approx(stats.chi2.ppf(0.5, 1)) and a[1] == pytest.approx(stats.chi2.ppf(0.02, 2))
    with pytest.raises(DomainError):
        thresholds_from_probability(0.01, (1, 2), split=(0.5, 0.5))


def test_accept_toy():
    c = ReM(1.0)
    assert not accept(c, TOY, Assignment([1, 1, 0, 0])).accepted
    d = accept(c, TOY, Assignment([1, 0, 1, 0]))
    assert d.accepted and d.M == pytest.approx(0.6)


def test_acceptance_invariant_under_relabeling():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(10, 2))
    d = DesignMatrix(X, tier_sizes=(1, 1))
    crits = [ReM(1.0), ReMT((0.5, 0.8)), ReG.marginal(0.8)]
    for z in all_assignments(10, 5)[::11]:
        z = Assignment(z)
        for c in crits:
            assert accept(c, d, z).accepted == accept(c, d, z.flipped()).accepted


def test_balanced_assignment_accepted_by_every_criterion():
    d = DesignMatrix(BALANCED, tier_sizes=(1, 1))
    z = Assignment([1, 1, 1, 0, 0, 0])
    for c in (ReM(1e-12), ReMT((1e-12, 1e-12)), ReG.mahalanobis_ball(1e-12), ReG.marginal(1e-9)):
        assert accept(c, d, z).accepted


def test_single_tier_remt_equals_rem():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(10, 3))
    d = DesignMatrix(X, tier_sizes=(3,))
    for z in all_assignments(10, 4):
        z = Assignment(z)
        assert accept(ReMT((1.2,)), d, z).accepted == accept(ReM(1.2), d, z).accepted


def test_threshold_validation():
    with pytest.raises(DomainError):
        ReM(0.0)
    with pytest.raises(DomainError):
        ReMT((1.0, -1.0))


def test_reg_registration_checks():
    # checks run when the predicate is bound to a design (V_xx is needed)
    with pytest.raises(CriterionError):
        ReG(lambda mu, vxx: mu[0] > 0).validate(np.eye(2))  # asymmetric
    with pytest.raises(CriterionError):
        ReG(lambda mu, vxx: abs(mu[0]) > 1).validate(np.eye(2))  # rejects zero imbalance
    with pytest.raises(CriterionError):
        ReG(lambda mu, vxx: mu[0] > 0).compile(TOY, 2)
    ReG(lambda mu, vxx: abs(mu[0]) <= 1).validate(np.eye(2))


def test_reg_predicate_errors_surface():
    def bad(mu, vxx):
        if np.any(np.abs(mu) > 0.5):
            raise RuntimeError("boom")
        return True

    c = ReG(bad)
    with pytest.raises(CriterionError):
        accept(c, TOY, Assignment([1, 1, 0, 0]))


def test_mahalanobis_ball_matches_rem():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(10, 2))
    d = DesignMatrix(X)
    for z in all_assignments(10, 5):
        z = Assignment(z)
        assert accept(ReG.mahalanobis_ball(0.7), d, z).accepted == accept(ReM(0.7), d, z).accepted


@pytest.mark.parametrize("K, alpha, expected", [(10, 0.05, 0.401), (1, 0.05, 0.05), (2, 0.5, 0.75)])
def test_any_imbalance_probability(K, alpha, expected):
    assert any_imbalance_probability(K, alpha) == pytest.approx(expected, abs=1e-3)


def test_acceptance_probability_is_chi2_cdf():
    d = DesignMatrix(np.random.default_rng(0).normal(size=(30, 4)), tier_sizes=(1, 3))
    assert ReM(2.0).acceptance_probability(d) == pytest.approx(stats.chi2.cdf(2.0, 4), rel=1e-12)
    p = ReMT((0.5, 1.0)).acceptance_probability(d)
    assert p == pytest.approx(stats.chi2.cdf(0.5, 1) * stats.chi2.cdf(1.0, 3), rel=1e-12)


def test_criterion_from_config():
    d = DesignMatrix(np.random.default_rng(0).normal(size=(30, 3)), tier_sizes=(1, 2))
    c = criterion_from_config({"criterion": "rem", "p_a": 0.01}, d)
    assert c.a == pytest.approx(stats.chi2.ppf(0.01, 3))
    c = criterion_from_config({"criterion": "remt", "p_a": 0.01}, d)
    assert c.thresholds[0] == pytest.approx(stats.chi2.ppf(0.1, 1))
    c = criterion_from_config({"criterion": "remt", "p_a": 0.01, "split": [0.2, 0.05]}, d)
    assert c.thresholds[1] == pytest.approx(stats.chi2.ppf(0.05, 2))
    with pytest.raises(ConfigError):
        criterion_from_config({"criterion": "reg", "p_a": 0.1}, d)
    with pytest.raises(ConfigError):
        criterion_from_config({"criterion": "rem"}, d)
