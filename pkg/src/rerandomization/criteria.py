"""Balance criteria: ReM, tiered ReMT and the general predicate ReG.

A criterion is compiled against a design and a treated-group size into a
:class:`CompiledCriterion`, which evaluates whole batches of scaled
imbalance vectors ``mu = sqrt(n) * tau_hat_X`` at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CriterionError, DomainError
from .population import Assignment, DesignMatrix, TierBasis, covariate_imbalance, tier_orthogonalize
from .specialfn import chi2_cdf, chi2_quantile

Predicate = Callable[[np.ndarray, np.ndarray], "bool | np.ndarray"]


@dataclass(frozen=True)
class BalanceDiagnostics:
    M: float
    M_t: tuple[float, ...]
    accepted: bool
    draws_used: int = 1


class BalanceCriterion:
    """Base class.  Subclasses implement :meth:`_accept_batch`."""

    label: str = "criterion"

    def compile(self, design: DesignMatrix, n1: int) -> "CompiledCriterion":
        return CompiledCriterion(self, design, n1)

    def acceptance_probability(self, design: DesignMatrix) -> float:
        raise NotImplementedError

    def _prepare(self, compiled: "CompiledCriterion") -> None:
        pass

    def _accept_batch(self, compiled: "CompiledCriterion", mu, M, M_t) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class ReM(BalanceCriterion):
    """Accept when the Mahalanobis distance is at most ``a``."""

    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise DomainError(f"threshold must be positive, got {self.a!r}")

    @property
    def label(self) -> str:
        return f"ReM(a={self.a:g})"

    @classmethod
    def from_probability(cls, p_a: float, k: int) -> "ReM":
        return cls(thresholds_from_probability(p_a, (k,))[0])

    def acceptance_probability(self, design: DesignMatrix) -> float:
        return 1.0 if math.isinf(self.a) else chi2_cdf(self.a, design.k)

    def _accept_batch(self, compiled, mu, M, M_t):
        return M <= self.a


@dataclass(frozen=True)
class ReMT(BalanceCriterion):
    """Accept when every tier's Mahalanobis distance, computed on the
    block-orthogonalized covariates, is below its own threshold."""

    thresholds: tuple[float, ...]

    def __post_init__(self):
        th = tuple(float(a) for a in self.thresholds)
        if not th or any(not a > 0 for a in th):
            raise DomainError("tier thresholds must be positive")
        object.__setattr__(self, "thresholds", th)

    @property
    def label(self) -> str:
        return "ReMT(" + ", ".join(f"{a:g}" for a in self.thresholds) + ")"

    @classmethod
    def from_probability(cls, p_a: float, tier_sizes: Sequence[int]) -> "ReMT":
        return cls(thresholds_from_probability(p_a, tier_sizes))

    def _check(self, design: DesignMatrix) -> None:
        if design.tier_sizes is None:
            raise CriterionError("ReMT needs a design with a tier partition")
        if len(design.tier_sizes) != len(self.thresholds):
            raise CriterionError(
                f"{len(self.thresholds)} thresholds for {len(design.tier_sizes)} tiers"
            )

    def acceptance_probability(self, design: DesignMatrix) -> float:
        self._check(design)
        return float(
            np.prod([1.0 if math.isinf(a) else chi2_cdf(a, k) for a, k in zip(self.thresholds, design.tier_sizes)])
        )

    def _prepare(self, compiled):
        self._check(compiled.design)

    def _accept_batch(self, compiled, mu, M, M_t):
        return np.all(M_t <= np.asarray(self.thresholds), axis=1)


@dataclass(frozen=True)
class ReG(BalanceCriterion):
    """General criterion: accept when ``phi(mu, V_xx)`` is true.

    ``phi`` must be symmetric in ``mu``, accept ``mu = 0`` and be almost
    surely continuous under the Gaussian law of ``mu``.  The first two are
    spot-checked when compiled; continuity is the caller's responsibility.
    Set ``vectorized`` when ``phi`` accepts a ``(B, K)`` batch, and
    ``unimodal`` when the region is known to make the covariate part of
    the limit law unimodal (for example a symmetric convex region), which
    lets confidence intervals skip the search over the variance split.
    """

    phi: Predicate
    label: str = "ReG"
    vectorized: bool = False
    unimodal: bool = False
    p_a_hint: float | None = field(default=None, compare=False)

    @classmethod
    def mahalanobis_ball(cls, a: float) -> "ReG":
        def phi(mu, vxx):
            vi = np.linalg.inv(vxx)
            return np.einsum("...i,ij,...j->...", mu, vi, mu) <= a

        return cls(phi, label=f"ball(a={a:g})", vectorized=True, unimodal=True)

    @classmethod
    def marginal(cls, c: float) -> "ReG":
        """Accept when every standardized covariate difference is within
        ``c``: a box, so the region is symmetric and convex."""

        def phi(mu, vxx):
            sd = np.sqrt(np.diag(vxx))
            return np.all(np.abs(mu) <= c * sd, axis=-1)

        return cls(phi, label=f"marginal(c={c:g})", vectorized=True, unimodal=True)

    def evaluate(self, mu: np.ndarray, vxx: np.ndarray) -> np.ndarray:
        mu = np.atleast_2d(mu)
        try:
            if self.vectorized:
                out = np.asarray(self.phi(mu, vxx))
            else:
                out = np.array([bool(self.phi(m, vxx)) for m in mu])
        except Exception as exc:  # surfaced with context
            raise CriterionError(f"predicate {self.label!r} raised {type(exc).__name__}: {exc}") from exc
        if out.shape != (mu.shape[0],):
            raise CriterionError(f"predicate {self.label!r} returned shape {out.shape}")
        return out.astype(bool)

    def validate(self, vxx: np.ndarray, n_checks: int = 1000, seed: int = 20160) -> None:
        K = vxx.shape[0]
        if not self.evaluate(np.zeros((1, K)), vxx)[0]:
            raise CriterionError(f"predicate {self.label!r} rejects perfect balance (mu = 0)")
        rng = np.random.default_rng(seed)
        chol = np.linalg.cholesky(vxx)
        # mixture of scales so the boundary is probed from both sides
        scales = np.exp(rng.uniform(np.log(0.01), np.log(3.0), size=(n_checks, 1)))
        mu = scales * (rng.standard_normal((n_checks, K)) @ chol.T)
        plus = self.evaluate(mu, vxx)
        minus = self.evaluate(-mu, vxx)
        if np.any(plus != minus):
            bad = int(np.argmax(plus != minus))
            raise CriterionError(
                f"predicate {self.label!r} is not symmetric: phi(mu) != phi(-mu) at mu={mu[bad]}"
            )

    def acceptance_probability(self, design: DesignMatrix) -> float:
        if self.p_a_hint is not None:
            return self.p_a_hint
        raise CriterionError("acceptance probability of a general predicate is not known in closed form")

    def _prepare(self, compiled):
        self.validate(compiled.vxx)

    def _accept_batch(self, compiled, mu, M, M_t):
        return self.evaluate(mu, compiled.vxx)


class CompiledCriterion:
    """A criterion bound to a design and group sizes."""

    def __init__(self, criterion: BalanceCriterion, design: DesignMatrix, n1: int):
        n = design.n
        if not 1 <= n1 <= n - 1:
            raise DomainError(f"n1 must be in [1, n-1], got {n1}")
        self.criterion = criterion
        self.design = design
        self.n1 = int(n1)
        self.n0 = n - self.n1
        self.r1 = self.n1 / n
        self.r0 = self.n0 / n
        self.vxx = design.cov / (self.r1 * self.r0)
        self.vxx_inv = design.cov_inv * (self.r1 * self.r0)
        self.basis: TierBasis | None = None
        if design.tier_sizes is not None:
            self.basis = tier_orthogonalize(design)
            self._tier_inv = [inv * (self.r1 * self.r0) for inv in self.basis.cov_blocks_inv]
        criterion._prepare(self)

    def mu_from(self, z: Assignment | np.ndarray) -> np.ndarray:
        return math.sqrt(self.design.n) * covariate_imbalance(self.design, z)

    def distances(self, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = np.atleast_2d(mu)
        M = np.einsum("bi,ij,bj->b", mu, self.vxx_inv, mu)
        np.maximum(M, 0.0, out=M)
        if self.basis is None:
            return M, M[:, None]
        mu_e = mu @ self.basis.gamma.T
        M_t = np.empty((mu.shape[0], self.basis.T))
        for t, (blk, inv) in enumerate(zip(self.basis.blocks, self._tier_inv)):
            m = mu_e[:, blk]
            M_t[:, t] = np.einsum("bi,ij,bj->b", m, inv, m)
        np.maximum(M_t, 0.0, out=M_t)
        return M, M_t

    def evaluate(self, mu: np.ndarray):
        """(accepted, M, M_t) for a batch of ``mu`` rows."""
        M, M_t = self.distances(mu)
        acc = self.criterion._accept_batch(self, np.atleast_2d(mu), M, M_t)
        return acc, M, M_t

    def diagnose(self, z: Assignment | np.ndarray, draws_used: int = 1) -> BalanceDiagnostics:
        acc, M, M_t = self.evaluate(self.mu_from(z)[None, :])
        return BalanceDiagnostics(float(M[0]), tuple(float(v) for v in M_t[0]), bool(acc[0]), draws_used)


def mahalanobis(X: DesignMatrix, z: Assignment) -> float:
    """(n1 n0 / n) tau_hat_X' S_X^{-1} tau_hat_X."""
    z = z if isinstance(z, Assignment) else Assignment(z)
    d = covariate_imbalance(X, z)
    return float(max(z.n1 * z.n0 / z.n * d @ X.cov_inv @ d, 0.0))


def tier_distances(basis: TierBasis, z: Assignment) -> tuple[float, ...]:
    z = z if isinstance(z, Assignment) else Assignment(z)
    zz = z.z.astype(bool)
    d = basis.E[zz].mean(axis=0) - basis.E[~zz].mean(axis=0)
    f = z.n1 * z.n0 / z.n
    return tuple(float(max(f * d[b] @ inv @ d[b], 0.0)) for b, inv in zip(basis.blocks, basis.cov_blocks_inv))


def thresholds_from_probability(
    p_a: float, tier_sizes: Sequence[int], split: Sequence[float] | None = None
) -> tuple[float, ...]:
    """Per-tier thresholds whose product of chi-square probabilities is
    ``p_a``.  By default every tier gets ``p_a ** (1/T)``; ``split`` gives
    explicit per-tier probabilities instead.  ``p_a == 1`` means no
    restriction and returns infinite thresholds."""
    if not 0 < p_a <= 1:
        raise DomainError(f"p_a must be in (0, 1], got {p_a!r}")
    T = len(tier_sizes)
    if split is None:
        probs = [p_a ** (1.0 / T)] * T
    else:
        probs = [float(p) for p in split]
        if len(probs) != T or not all(0 < p <= 1 for p in probs):
            raise DomainError("split must give one probability in (0, 1] per tier")
        if abs(math.prod(probs) - p_a) > 1e-9 * p_a:
            raise DomainError("per-tier probabilities must multiply to p_a")
    return tuple(math.inf if p >= 1 else chi2_quantile(p, k) for p, k in zip(probs, tier_sizes))


def accept(c: BalanceCriterion, X: DesignMatrix, z: Assignment) -> BalanceDiagnostics:
    z = z if isinstance(z, Assignment) else Assignment(z)
    return c.compile(X, z.n1).diagnose(z)


def any_imbalance_probability(K: int, alpha: float) -> float:
    """Chance that at least one of K independent covariates shows a
    difference significant at level alpha."""
    if K < 1 or not 0 < alpha < 1:
        raise DomainError("need K >= 1 and 0 < alpha < 1")
    return 1.0 - (1.0 - alpha) ** K


def criterion_from_config(cfg: Mapping, design: DesignMatrix) -> BalanceCriterion:
    """Build ReM or ReMT from ``criterion``, ``p_a``, ``thresholds`` and
    (ReMT only) ``split`` keys.  General predicates are code, not configuration."""
    kind = str(cfg.get("criterion", "rem")).lower()
    thresholds = cfg.get("thresholds")
    p_a = cfg.get("p_a")
    if kind == "reg":
        raise ConfigError("general predicates must be supplied programmatically")
    if kind not in ("rem", "remt"):
        raise ConfigError(f"unknown criterion {kind!r}")
    if thresholds is None and p_a is None:
        raise ConfigError("set either p_a or thresholds")
    if kind == "rem":
        if thresholds is not None:
            th = thresholds if isinstance(thresholds, (int, float)) else thresholds[0]
            return ReM(float(th))
        return ReM.from_probability(float(p_a), design.k)
    if design.tier_sizes is None:
        raise ConfigError("criterion 'remt' needs tiers")
    if thresholds is not None:
        return ReMT(tuple(float(a) for a in thresholds))
    split = cfg.get("split")
    if split is not None:
        return ReMT(thresholds_from_probability(float(p_a), design.tier_sizes, split))
    return ReMT.from_probability(float(p_a), design.tier_sizes)
