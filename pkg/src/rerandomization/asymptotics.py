"""Limiting distributions of the difference-in-means under rerandomization.

Under ReM the standardized estimator converges to

    Q = sqrt(1 - R^2) * eps0 + sqrt(R^2) * L_{K,a},

with ``L_{K,a} = chi_{K,a} * S * sqrt(beta_K)``.  ReMT replaces the single
``L`` term by one independent term per tier, and ReG replaces it by the
projection of a Gaussian vector conditioned on the acceptance region.
Quantiles of these non-Gaussian laws are estimated by Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

from .errors import AcceptanceStarvationError, DomainError
from .population import TierBasis
from .specialfn import (
    SeededGenerator,
    as_rng,
    chi2_cdf,
    gaussian_pdf,
    sample_beta_half,
    sample_trunc_chi,
)

DEFAULT_N_MC = 1_000_000
MIN_REGION_ACCEPTANCE = 1e-5
MIN_REGION_ACCEPTED = 100


def v_coeff(k: int, a: float) -> float:
    """Var(L_{k,a}) = P(chi^2_{k+2} <= a) / P(chi^2_k <= a)."""
    if not a > 0:
        raise DomainError(f"threshold must be positive, got {a!r}")
    if math.isinf(a):
        return 1.0
    num = chi2_cdf(a, k + 2)
    den = chi2_cdf(a, k)
    if den == 0.0:
        # both underflow; leading terms give a / (k + 2)
        return a / (k + 2)
    return num / den


def sample_L(k: int, a: float, g, size=None):
    """Draws of L_{k,a}, the first coordinate of a k-dim standard Gaussian
    vector conditioned on its squared length being at most ``a``."""
    rng = as_rng(g)
    chi = sample_trunc_chi(k, a, rng, size)
    sign = rng.integers(0, 2, size=size) * 2 - 1
    beta = sample_beta_half(k, rng, size)
    return chi * sign * np.sqrt(beta)


def density_L(l, k: int, a: float):
    """Density of L_{k,a}: phi(l) P(chi^2_{k-1} <= a - l^2) / P(chi^2_k <= a)."""
    scalar = np.ndim(l) == 0
    l_arr = np.asarray(l, dtype=float)
    if not a > 0:
        raise DomainError(f"threshold must be positive, got {a!r}")
    if math.isinf(a):
        out = gaussian_pdf(l_arr)
        return float(out) if scalar else out
    rest = a - l_arr * l_arr
    inside = rest > 0
    out = np.zeros(l_arr.shape)
    if k == 1:
        tail = np.ones(int(inside.sum()))
    else:
        tail = chi2_cdf(rest[inside], k - 1)
    out[inside] = gaussian_pdf(l_arr[inside]) * tail / chi2_cdf(a, k)
    return float(out) if scalar else out


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class AsymptoticModel:
    """Parameters of the ReM / ReMT limit law.

    ``rho2[t]`` is the share of V_tautau carried by tier ``t`` (a single
    entry equal to R^2 for ReM), ``dims[t]`` its dimension and
    ``thresholds[t]`` its Mahalanobis threshold.
    """

    vtt: float
    rho2: tuple[float, ...]
    dims: tuple[int, ...]
    thresholds: tuple[float, ...]

    def __post_init__(self):
        rho2 = tuple(float(r) for r in self.rho2)
        dims = tuple(int(d) for d in self.dims)
        th = tuple(float(a) for a in self.thresholds)
        object.__setattr__(self, "rho2", rho2)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "thresholds", th)
        if not (len(rho2) == len(dims) == len(th)) or not rho2:
            raise DomainError("rho2, dims and thresholds must have one entry per tier")
        if not self.vtt > 0:
            raise DomainError("V_tautau must be positive")
        if any(r < 0 for r in rho2) or sum(rho2) > 1 + 1e-12:
            raise DomainError(f"tier correlations {rho2} must be nonnegative and sum to at most 1")
        if any(d < 1 for d in dims) or any(not a > 0 for a in th):
            raise DomainError("dimensions must be >= 1 and thresholds > 0")

    @classmethod
    def rem(cls, vtt: float, r2: float, K: int, a: float) -> "AsymptoticModel":
        if not 0 <= r2 <= 1:
            raise DomainError(f"R^2 must be in [0, 1], got {r2}")
        return cls(vtt, (r2,), (K,), (a,))

    @classmethod
    def remt(cls, vtt: float, rho2: Sequence[float], dims: Sequence[int], thresholds: Sequence[float]):
        return cls(vtt, tuple(rho2), tuple(dims), tuple(thresholds))

    @property
    def r2(self) -> float:
        return min(sum(self.rho2), 1.0)

    @property
    def rho2_rest(self) -> float:
        return max(1.0 - sum(self.rho2), 0.0)

    @property
    def K(self) -> int:
        return sum(self.dims)

    @property
    def p_a(self) -> float:
        return math.prod(1.0 if math.isinf(a) else chi2_cdf(a, k) for k, a in zip(self.dims, self.thresholds))

    @property
    def v(self) -> tuple[float, ...]:
        return tuple(v_coeff(k, a) for k, a in zip(self.dims, self.thresholds))

    symmetric = True


@dataclass(frozen=True)
class RegModel:
    """Limit law under a general criterion: ``eps + V_tx V_xx^{-1} B`` with
    ``B ~ N(0, V_xx)`` conditioned on the acceptance region."""

    vtt: float
    vtx: np.ndarray
    vxx: np.ndarray
    criterion: object
    n_region: int = 200_000
    seed: int = 0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.vtt > 0:
            raise DomainError("V_tautau must be positive")
        object.__setattr__(self, "vtx", np.asarray(self.vtx, dtype=float))
        object.__setattr__(self, "vxx", np.asarray(self.vxx, dtype=float))

    @property
    def coef(self) -> np.ndarray:
        return np.linalg.solve(self.vxx, self.vtx)

    @property
    def r2(self) -> float:
        return float(min(max(self.vtx @ self.coef / self.vtt, 0.0), 1.0))

    def region(self) -> "RegionSample":
        if "region" not in self._cache:
            self._cache["region"] = sample_region(
                self.criterion, self.vxx, self.n_region, SeededGenerator(self.seed, 0).child(7)
            )
        return self._cache["region"]

    symmetric = True


# ---------------------------------------------------------------------------
# Monte Carlo distributions


class MixtureDistribution:
    """Monte Carlo sample of a limit law, stored standardized.

    ``samples`` are draws of ``Q`` (unit-variance scale before
    truncation); ``scale`` multiplies them to give draws of
    ``sqrt(n) (tau_hat - tau)``.
    """

    def __init__(self, samples: np.ndarray, scale: float = 1.0, symmetric: bool = True):
        self.samples = np.asarray(samples, dtype=float)
        self.scale = float(scale)
        self.symmetric = symmetric

    @property
    def n_mc(self) -> int:
        return self.samples.shape[0]

    @cached_property
    def sorted(self) -> np.ndarray:
        return np.sort(self.samples)

    def order_stats(self, idx: np.ndarray) -> np.ndarray:
        if "sorted" in self.__dict__:
            return self.sorted[idx]
        return np.partition(self.samples, idx)[idx]

    def _ranks(self, xi: float) -> tuple[int, int]:
        n = self.n_mc
        hi = min(max(math.ceil(n * xi), 1), n) - 1
        lo = min(max(math.ceil(n * (1.0 - xi)), 1), n) - 1
        return lo, hi

    def quantile(self, xi: float) -> float:
        """Standardized quantile; symmetrized for symmetric laws."""
        if not 0 < xi < 1:
            raise DomainError("quantile level must be in (0, 1)")
        lo, hi = self._ranks(xi)
        q_lo, q_hi = self.order_stats(np.array([lo, hi]))
        if self.symmetric:
            return 0.5 * (q_hi - q_lo)
        return float(q_hi)

    def quantile_se(self, xi: float, n_boot: int = 400, seed: int = 0) -> float:
        """Bootstrap SE of :meth:`quantile`, computed exactly through the
        joint law of two uniform order statistics rather than resampling."""
        n = self.n_mc
        lo, hi = self._ranks(xi)
        m1, m2 = sorted((lo + 1, hi + 1))
        rng = np.random.default_rng(seed)
        u1 = rng.beta(m1, n - m1 + 1, n_boot)
        if m2 > m1:
            u2 = u1 + (1.0 - u1) * rng.beta(m2 - m1, n - m2 + 1, n_boot)
        else:
            u2 = u1
        i1 = np.clip(np.ceil(n * u1).astype(np.int64) - 1, 0, n - 1)
        i2 = np.clip(np.ceil(n * u2).astype(np.int64) - 1, 0, n - 1)
        s = self.sorted
        if self.symmetric:
            boot = 0.5 * (s[i2] - s[i1]) if hi >= lo else 0.5 * (s[i1] - s[i2])
        else:
            boot = s[i2] if hi >= lo else s[i1]
        return float(np.std(boot, ddof=1)) * self.scale

    def cdf(self, x) -> np.ndarray:
        """Empirical CDF of the scaled law."""
        return np.searchsorted(self.sorted * self.scale, np.asarray(x, dtype=float), side="right") / self.n_mc

    def variance(self) -> float:
        return float(np.mean(self.samples**2) if self.symmetric else np.var(self.samples)) * self.scale**2


@lru_cache(maxsize=16)
def component_draws(dims: tuple[int, ...], thresholds: tuple[float, ...], n_mc: int, seed: int):
    """Shared standardized draws (eps0, L_1, ..., L_T).  Reusing them across
    models with the same tier structure gives common random numbers."""
    g = SeededGenerator(seed)
    eps = g.child(0).rng.standard_normal(n_mc)
    Ls = tuple(sample_L(k, a, g.child(t + 1), n_mc) for t, (k, a) in enumerate(zip(dims, thresholds)))
    for arr in (eps, *Ls):
        arr.setflags(write=False)
    return eps, Ls


def _mix(model: AsymptoticModel, eps: np.ndarray, Ls) -> np.ndarray:
    out = math.sqrt(model.rho2_rest) * eps
    for r, L in zip(model.rho2, Ls):
        if r > 0:
            out = out + math.sqrt(r) * L
    return out


def build_distribution(model, n_mc: int = DEFAULT_N_MC, g=None, seed: int = 0) -> MixtureDistribution:
    """Monte Carlo draws of the limit law of sqrt(n) (tau_hat - tau).

    Passing ``g`` gives fresh draws; otherwise cached draws for ``seed`` are
    reused across calls.
    """
    if isinstance(model, RegModel):
        return _build_reg(model, n_mc, g, seed)
    if g is None:
        eps, Ls = component_draws(model.dims, model.thresholds, int(n_mc), int(seed))
    else:
        rng = as_rng(g)
        eps = rng.standard_normal(n_mc)
        Ls = [sample_L(k, a, rng, n_mc) for k, a in zip(model.dims, model.thresholds)]
    return MixtureDistribution(_mix(model, eps, Ls), math.sqrt(model.vtt), symmetric=True)


def _build_reg(model: RegModel, n_mc: int, g, seed: int) -> MixtureDistribution:
    region = model.region()
    rng = as_rng(g) if g is not None else SeededGenerator(seed).child(11).rng
    proj = region.accepted @ model.coef / math.sqrt(model.vtt)
    idx = rng.integers(0, proj.shape[0], n_mc)
    eps = rng.standard_normal(n_mc) * math.sqrt(max(1.0 - model.r2, 0.0))
    return MixtureDistribution(eps + proj[idx], math.sqrt(model.vtt), symmetric=True)


def mc_quantile(d: MixtureDistribution, xi: float, with_se: bool = False):
    """nu_xi on the scale of sqrt(n) (tau_hat - tau)."""
    q = d.quantile(xi) * d.scale
    if with_se:
        return q, d.quantile_se(xi)
    return q


def quantile_range(d: MixtureDistribution, alpha: float, vtt: float | None = None) -> tuple[float, float]:
    """Central (1 - alpha) range.  ``vtt`` rescales a standardized law."""
    if not 0 < alpha < 1:
        raise DomainError("alpha must be in (0, 1)")
    scale = math.sqrt(vtt) if vtt is not None else d.scale
    hi = d.quantile(1 - alpha / 2) * scale
    if d.symmetric:
        return -hi, hi
    return d.quantile(alpha / 2) * scale, hi


def ks_distance(x: np.ndarray, d: MixtureDistribution) -> float:
    """Two-sample Kolmogorov-Smirnov statistic between ``x`` and the
    Monte Carlo law ``d``."""
    a = np.sort(np.asarray(x, dtype=float))
    b = d.sorted * d.scale
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


# ---------------------------------------------------------------------------
# variances


def asymptotic_variance(model) -> float:
    """Variance of the limit law of sqrt(n) (tau_hat - tau)."""
    if isinstance(model, RegModel):
        vphi = model.region().cov
        c = model.coef
        return float(model.vtt * (1.0 - model.r2) + c @ vphi @ c)
    loss = sum((1.0 - v) * r for v, r in zip(model.v, model.rho2))
    return model.vtt * (1.0 - loss)


def priasv(model) -> float:
    """Percent reduction in asymptotic sampling variance relative to
    complete randomization, as a fraction."""
    return 1.0 - asymptotic_variance(model) / model.vtt


def remt_covariate_variance(basis: TierBasis, thresholds: Sequence[float], r1: float, r0: float | None = None):
    """Asymptotic covariance of sqrt(n) tau_hat_X under ReMT."""
    r0 = 1.0 - r1 if r0 is None else r0
    if len(thresholds) != basis.T:
        raise DomainError("one threshold per tier is required")
    K = basis.gamma.shape[0]
    D = np.zeros((K, K))
    for blk, cov, k, a in zip(basis.blocks, basis.cov_blocks, basis.tier_sizes, thresholds):
        D[blk, blk] = v_coeff(k, a) * cov
    gi = np.linalg.inv(basis.gamma)
    return gi @ D @ gi.T / (r1 * r0)


@dataclass(frozen=True)
class RegionSample:
    accepted: np.ndarray
    draws: int
    hits: int

    @property
    def acceptance(self) -> float:
        return self.hits / self.draws

    @cached_property
    def cov(self) -> np.ndarray:
        # the region is symmetric, so the mean is zero by construction
        b = self.accepted
        return b.T @ b / b.shape[0]


def sample_region(criterion, vxx: np.ndarray, n_accept: int, g, max_draws: int = 50_000_000) -> RegionSample:
    """Rejection-sample ``B ~ N(0, V_xx)`` conditioned on acceptance."""
    rng = as_rng(g)
    vxx = np.asarray(vxx, dtype=float)
    chol = np.linalg.cholesky(vxx)
    K = vxx.shape[0]
    batch = 100_000
    parts, accepted, draws = [], 0, 0
    while accepted < n_accept and draws < max_draws:
        b = rng.standard_normal((batch, K)) @ chol.T
        ok = criterion.evaluate(b, vxx)
        parts.append(b[ok])
        accepted += int(ok.sum())
        draws += batch
        if draws == batch and accepted / draws < MIN_REGION_ACCEPTANCE:
            break
    if accepted < MIN_REGION_ACCEPTED or accepted / draws < MIN_REGION_ACCEPTANCE:
        raise AcceptanceStarvationError(
            f"only {accepted} of {draws} Gaussian draws fell in the acceptance region"
        )
    return RegionSample(np.concatenate(parts)[:n_accept], draws, accepted)


@dataclass(frozen=True)
class RegionVariance:
    cov: np.ndarray
    psd_gap_ok: bool
    min_gap_eigenvalue: float
    gap_se: float
    acceptance: float


def reg_region_variance(criterion, vxx: np.ndarray, n_mc: int, g) -> RegionVariance:
    """Monte Carlo Var(B | B in G) and a check that it does not exceed
    Var(B) = V_xx in the positive semidefinite order."""
    region = sample_region(criterion, vxx, n_mc, g)
    cov = region.cov
    gap = np.asarray(vxx) - cov
    w, vecs = np.linalg.eigh(gap)
    u = vecs[:, 0]
    proj2 = (region.accepted @ u) ** 2
    se = float(np.std(proj2, ddof=1) / math.sqrt(proj2.size))
    return RegionVariance(cov, bool(w[0] >= -3.0 * se), float(w[0]), se, region.acceptance)
