"""Estimation and confidence intervals after a rerandomized experiment.

Only observed outcomes, the realized assignment and the (known) covariate
matrix are used here.  Projection variances use each arm's own covariate
covariance; the difference term uses the full-population covariance,
since the covariates of every unit are known.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .asymptotics import (
    AsymptoticModel,
    MixtureDistribution,
    RegionSample,
    component_draws,
    sample_region,
    v_coeff,
)
from .criteria import BalanceCriterion, ReG, ReM, ReMT
from .errors import CriterionError, DomainError
from .population import Assignment, DesignMatrix, TierBasis, tier_orthogonalize
from .specialfn import SeededGenerator, gaussian_quantile

DEFAULT_N_MC = 1_000_000
DEFAULT_REG_N_MC = 200_000
LAMBDA_GRID = 33


def _as_assignment(z) -> Assignment:
    return z if isinstance(z, Assignment) else Assignment(np.asarray(z))


def _outcomes(y, z: Assignment) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (z.n,):
        raise DomainError("outcome vector and assignment lengths differ")
    if not np.all(np.isfinite(y)):
        raise DomainError("outcomes must be finite")
    return y


def difference_in_means(y, z) -> float:
    """Treated mean minus control mean."""
    z = _as_assignment(z)
    y = _outcomes(y, z)
    t = z.z.astype(bool)
    return float(y[t].mean() - y[~t].mean())


@dataclass(frozen=True)
class ArmEstimates:
    """Per-arm sample moments and the pooled estimates built from them.

    ``vtt_hat`` is consistent for V_tautau + S2_tau - S2_{tau|X}, which is
    at least V_tautau, so intervals built from it are conservative.
    """

    n1: int
    n0: int
    mean1: float
    mean0: float
    s2_1: float
    s2_0: float
    s_1x: np.ndarray
    s_0x: np.ndarray
    s2_1_x: float
    s2_0_x: float
    s2_diff_x: float
    vtt_hat: float
    vtx_hat: np.ndarray
    r2_raw: float
    r2_hat: float

    @property
    def tau_hat(self) -> float:
        return self.mean1 - self.mean0


def _arm_cov(y: np.ndarray, X: np.ndarray) -> np.ndarray:
    yc = y - y.mean()
    xc = X - X.mean(axis=0)
    return xc.T @ yc / (y.shape[0] - 1)


def _arm_projection_var(s_yx: np.ndarray, X: np.ndarray) -> float:
    """Sample variance of the within-arm least-squares fit of y on X,
    ``s_yx' s_X^{-1} s_xy`` with the arm's own covariate covariance.  A
    pseudo-inverse covers arms where a covariate is constant."""
    xc = X - X.mean(axis=0)
    s_x = xc.T @ xc / (X.shape[0] - 1)
    coef = np.linalg.lstsq(s_x, s_yx, rcond=None)[0]
    return float(s_yx @ coef)


def arm_estimates(y, z, X: DesignMatrix) -> ArmEstimates:
    z = _as_assignment(z)
    y = _outcomes(y, z)
    if z.n != X.n:
        raise DomainError("assignment and design sizes differ")
    if z.n1 < 2 or z.n0 < 2:
        raise DomainError("each arm needs at least two units")
    t = z.z.astype(bool)
    r1, r0 = z.r1, z.r0
    y1, y0 = y[t], y[~t]
    s_inv = X.cov_inv
    s_1x = _arm_cov(y1, X.X[t])
    s_0x = _arm_cov(y0, X.X[~t])
    d = s_1x - s_0x
    s2_1 = float(np.var(y1, ddof=1))
    s2_0 = float(np.var(y0, ddof=1))
    s2_1_x = _arm_projection_var(s_1x, X.X[t])
    s2_0_x = _arm_projection_var(s_0x, X.X[~t])
    s2_diff_x = float(d @ s_inv @ d)
    vtt = s2_1 / r1 + s2_0 / r0 - s2_diff_x
    num = s2_1_x / r1 + s2_0_x / r0 - s2_diff_x
    if vtt > 0:
        raw = num / vtt
        r2 = min(max(raw, 0.0), 1.0)
    else:
        vtt, raw, r2 = 0.0, 0.0, 0.0
    return ArmEstimates(
        n1=z.n1,
        n0=z.n0,
        mean1=float(y1.mean()),
        mean0=float(y0.mean()),
        s2_1=s2_1,
        s2_0=s2_0,
        s_1x=s_1x,
        s_0x=s_0x,
        s2_1_x=s2_1_x,
        s2_0_x=s2_0_x,
        s2_diff_x=s2_diff_x,
        vtt_hat=float(vtt),
        vtx_hat=s_1x / r1 + s_0x / r0,
        r2_raw=float(raw),
        r2_hat=float(r2),
    )


def estimate_vtt_r2(y, z, X: DesignMatrix) -> tuple[float, float, ArmEstimates]:
    est = arm_estimates(y, z, X)
    return est.vtt_hat, est.r2_hat, est


def normalize_rho(raw: Sequence[float], r2: float) -> tuple[np.ndarray, float]:
    """Clip negative tier shares to zero and rescale the rest to sum to
    ``r2``.  If nothing positive remains, ``r2`` itself becomes zero."""
    raw = np.asarray(raw, dtype=float)
    clipped = np.maximum(raw, 0.0)
    total = clipped.sum()
    if total <= 0 or r2 <= 0:
        return np.zeros_like(raw), 0.0
    return clipped * (r2 / total), float(r2)


def estimate_rho_t(y, z, basis: TierBasis, est: ArmEstimates | None = None) -> np.ndarray:
    """(rho_1^2, ..., rho_T^2, rho_{T+1}^2) estimated from one experiment."""
    z = _as_assignment(z)
    y = _outcomes(y, z)
    if est is None:
        est = arm_estimates(y, z, basis.design)
    t = z.z.astype(bool)
    r1, r0 = z.r1, z.r0
    e1 = _arm_cov(y[t], basis.E[t])
    e0 = _arm_cov(y[~t], basis.E[~t])
    raw = []
    for blk, inv in zip(basis.blocks, basis.cov_blocks_inv):
        a, b = e1[blk], e0[blk]
        d = a - b
        num = (
            _arm_projection_var(a, basis.E[t][:, blk]) / r1
            + _arm_projection_var(b, basis.E[~t][:, blk]) / r0
            - d @ inv @ d
        )
        raw.append(num / est.vtt_hat if est.vtt_hat > 0 else 0.0)
    rho, r2 = normalize_rho(raw, est.r2_hat)
    return np.append(rho, 1.0 - r2)


@dataclass(frozen=True)
class NeymanInterval:
    lower: float
    upper: float
    variance: float

    @property
    def length(self) -> float:
        return self.upper - self.lower


def neyman_baseline(y, z, alpha: float = 0.05) -> NeymanInterval:
    """Variance s1^2/n1 + s0^2/n0 and the matching Gaussian interval, as
    if the experiment had been completely randomized."""
    _check_alpha(alpha)
    z = _as_assignment(z)
    y = _outcomes(y, z)
    if z.n1 < 2 or z.n0 < 2:
        raise DomainError("each arm needs at least two units")
    t = z.z.astype(bool)
    var = float(np.var(y[t], ddof=1) / z.n1 + np.var(y[~t], ddof=1) / z.n0)
    tau = difference_in_means(y, z)
    half = gaussian_quantile(1 - alpha / 2) * math.sqrt(var)
    return NeymanInterval(tau - half, tau + half, var)


@dataclass
class AnalysisReport:
    method: str
    alpha: float
    tau_hat: float
    variance: float
    lower: float
    upper: float
    vtt_hat: float
    r2_hat: float
    nu: float
    nu_se: float
    neyman: NeymanInterval
    rho2_hat: tuple[float, ...] | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        out = asdict(self)
        out["length"] = self.length
        out["neyman"]["length"] = self.neyman.length
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must be in (0, 1), got {alpha!r}")


def mixture_quantile(
    model: AsymptoticModel, xi: float, n_mc: int = DEFAULT_N_MC, seed: int = 0, with_se: bool = True
):
    """(nu_xi, bootstrap SE) of the standardized limit law.  A purely
    Gaussian law (all shares zero) uses the exact normal quantile; the SE
    is NaN when ``with_se`` is false."""
    if model.r2 == 0.0 or all(math.isinf(a) for a in model.thresholds):
        return gaussian_quantile(xi), 0.0
    eps, Ls = component_draws(model.dims, model.thresholds, int(n_mc), int(seed))
    out = math.sqrt(model.rho2_rest) * eps
    for r, L in zip(model.rho2, Ls):
        if r > 0:
            out = out + math.sqrt(r) * L
    d = MixtureDistribution(out)
    se = d.quantile_se(xi, n_boot=200, seed=seed) if with_se else math.nan
    return d.quantile(xi), se


def confidence_interval(
    criterion: BalanceCriterion | None,
    y,
    z,
    X: DesignMatrix,
    alpha: float = 0.05,
    n_mc: int = DEFAULT_N_MC,
    seed: int = 0,
    basis: TierBasis | None = None,
    with_se: bool = True,
) -> AnalysisReport:
    """Large-sample interval for the average effect under the design's
    criterion.  ``criterion=None`` analyzes a complete randomization."""
    _check_alpha(alpha)
    if isinstance(criterion, ReG):
        return confidence_interval_reg(criterion, y, z, X, alpha, seed=seed)
    z = _as_assignment(z)
    y = _outcomes(y, z)
    est = arm_estimates(y, z, X)
    rho_hat = None
    if criterion is None:
        model = AsymptoticModel.rem(est.vtt_hat or 1.0, 0.0, X.k, math.inf)
        method = "CRE"
    elif isinstance(criterion, ReM):
        model = AsymptoticModel.rem(est.vtt_hat or 1.0, est.r2_hat, X.k, criterion.a)
        method = criterion.label
    elif isinstance(criterion, ReMT):
        if X.tier_sizes is None or len(X.tier_sizes) != len(criterion.thresholds):
            raise CriterionError("ReMT analysis needs the design's tier partition")
        basis = basis if basis is not None else tier_orthogonalize(X)
        rho_full = estimate_rho_t(y, z, basis, est)
        rho_hat = tuple(float(r) for r in rho_full)
        model = AsymptoticModel.remt(est.vtt_hat or 1.0, rho_full[:-1], X.tier_sizes, criterion.thresholds)
        method = criterion.label
    else:
        raise CriterionError(f"no interval construction for {type(criterion).__name__}")

    xi = 1 - alpha / 2
    nu, nu_se = mixture_quantile(model, xi, n_mc, seed, with_se)
    n = z.n
    loss = sum((1.0 - v_coeff(k, a)) * r for k, a, r in zip(model.dims, model.thresholds, model.rho2))
    variance = est.vtt_hat * (1.0 - loss) / n
    half = nu * math.sqrt(est.vtt_hat / n)
    tau = est.tau_hat
    return AnalysisReport(
        method=method,
        alpha=alpha,
        tau_hat=tau,
        variance=float(variance),
        lower=tau - half,
        upper=tau + half,
        vtt_hat=est.vtt_hat,
        r2_hat=est.r2_hat,
        nu=float(nu),
        nu_se=float(nu_se),
        neyman=neyman_baseline(y, z, alpha),
        rho2_hat=rho_hat,
        diagnostics={
            "n": n,
            "n1": z.n1,
            "n0": z.n0,
            "K": X.k,
            "dims": list(model.dims),
            "thresholds": list(model.thresholds),
            "p_a": model.p_a,
            "r2_raw": est.r2_raw,
            "n_mc": int(n_mc),
        },
    )


def confidence_interval_reg(
    criterion: ReG,
    y,
    z,
    X: DesignMatrix,
    alpha: float = 0.05,
    n_mc: int = DEFAULT_REG_N_MC,
    lambda_grid_size: int = LAMBDA_GRID,
    seed: int = 0,
    region: RegionSample | None = None,
) -> AnalysisReport:
    """Conservative interval under a general criterion.

    The half-width uses the largest quantile of
    ``sqrt(lam) eps0 + V_tx_hat V_xx^{-1} B | B in G`` over ``lam`` in
    ``[0, V_eps_hat]``; the accepted ``B`` draws and ``eps0`` are shared
    across the grid.  A criterion flagged unimodal skips the search.
    """
    _check_alpha(alpha)
    if lambda_grid_size < 2:
        raise DomainError("lambda grid needs at least two points")
    z = _as_assignment(z)
    y = _outcomes(y, z)
    est = arm_estimates(y, z, X)
    vxx = X.cov / (z.r1 * z.r0)
    g = SeededGenerator(seed)
    if region is None:
        region = sample_region(criterion, vxx, n_mc, g.child(1))
    proj = region.accepted @ np.linalg.solve(vxx, est.vtx_hat)
    eps = g.child(2).rng.standard_normal(proj.shape[0])
    v_eps = max(est.vtt_hat * (1.0 - est.r2_hat), 0.0)
    xi = 1 - alpha / 2

    def q(lam: float) -> MixtureDistribution:
        return MixtureDistribution(math.sqrt(lam) * eps + proj)

    if criterion.unimodal:
        grid = np.array([v_eps])
    else:
        grid = np.linspace(0.0, v_eps, lambda_grid_size)
    qs = np.array([q(lam).quantile(xi) for lam in grid])
    j = int(np.argmax(qs))
    best = q(grid[j])
    q_hat = float(qs[j])
    q_se = best.quantile_se(xi, n_boot=200, seed=seed)
    n = z.n
    half = q_hat / math.sqrt(n)
    tau = est.tau_hat
    variance = (v_eps + float(np.mean(proj**2))) / n
    return AnalysisReport(
        method=f"ReG[{criterion.label}]",
        alpha=alpha,
        tau_hat=tau,
        variance=variance,
        lower=tau - half,
        upper=tau + half,
        vtt_hat=est.vtt_hat,
        r2_hat=est.r2_hat,
        nu=q_hat / math.sqrt(est.vtt_hat) if est.vtt_hat > 0 else 0.0,
        nu_se=q_se / math.sqrt(est.vtt_hat) if est.vtt_hat > 0 else 0.0,
        neyman=neyman_baseline(y, z, alpha),
        diagnostics={
            "n": n,
            "n1": z.n1,
            "n0": z.n0,
            "K": X.k,
            "region_acceptance": region.acceptance,
            "region_draws": int(proj.shape[0]),
            "lambda_argmax": float(grid[j]),
            "v_eps_hat": v_eps,
            "lambda_grid": grid.tolist(),
            "q_grid": qs.tolist(),
        },
    )
