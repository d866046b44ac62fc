"""Data-generating processes and the replication engine.

A study fixes one finite population (covariates and both potential
outcomes), draws a bank of rerandomized assignments together with a paired
completely randomized assignment per replication, and summarizes the
sampling behaviour of the difference-in-means and of the intervals.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .asymptotics import AsymptoticModel, MixtureDistribution, build_distribution, ks_distance, v_coeff
from .criteria import BalanceCriterion, ReM, ReMT, criterion_from_config
from .errors import BudgetExhaustedError, ConfigError, DomainError
from .inference import _jsonable, confidence_interval, neyman_baseline
from .population import DesignMatrix, finite_moments, tier_correlations, tier_orthogonalize
from .sampler import AssignmentBank, assignment_bank
from .specialfn import SeededGenerator, as_rng, gaussian_quantile

# ---------------------------------------------------------------------------
# data-generating processes


def dgp_binary(
    n: int,
    K: int = 3,
    beta1: Sequence[float] = (2.0, 3.0, 4.0),
    beta0: Sequence[float] = (0.0, 1.0, 1.0),
    g=None,
    additive: bool = False,
):
    """Binary covariates and threshold-crossing binary outcomes.

    ``Y(z) = 1{z + beta_z'(X - 0.5) + delta_z >= 0}`` with independent
    standard normal ``delta_z``.  With ``additive=True`` the control
    outcome is replaced by ``Y(1) - tau`` so the effect is constant.
    """
    beta1 = np.asarray(beta1, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    if beta1.shape != (K,) or beta0.shape != (K,):
        raise DomainError("coefficient vectors must have length K")
    rng = as_rng(g)
    X = rng.binomial(1, 0.5, size=(n, K)).astype(float)
    d1 = rng.standard_normal(n)
    d0 = rng.standard_normal(n)
    y1 = (1.0 + (X - 0.5) @ beta1 + d1 >= 0).astype(float)
    y0 = ((X - 0.5) @ beta0 + d0 >= 0).astype(float)
    if additive:
        y0 = y1 - (y1 - y0).mean()
    return X, y1, y0


@dataclass(frozen=True)
class GpaCoefficients:
    """Outcome model for the tiered GPA-style population.

    Covariates are standardized before entering the model.  Each tier's
    total coefficient norm is ``tier_weights[t]``, split evenly over the
    tier's columns with alternating signs after the first.  The treatment
    adds ``effect`` plus interactions with the first covariate.
    """

    intercept: float = 2.4
    tier_weights: tuple[float, ...] = (0.42, 0.26, 0.2)
    quadratic: float = 0.06
    effect: float = 0.12
    interaction: float = 0.08
    latent_loading: float = 0.6


def _gpa_covariates(n: int, tier_sizes: Sequence[int], rng: np.random.Generator, loading: float):
    ability = rng.standard_normal(n)
    cols = []
    for t, k in enumerate(tier_sizes):
        for j in range(k):
            z = loading * ability + math.sqrt(1 - loading**2) * rng.standard_normal(n)
            if t == 0:
                # high-school-GPA-like: continuous on [0, 4]
                cols.append(np.clip(3.0 + 0.5 * z, 0.0, 4.0))
            elif t == 1 and j % 2 == 1:
                cols.append(18.0 + np.abs(1.5 * z + rng.standard_normal(n)))
            else:
                cut = rng.uniform(-0.8, 0.8)
                cols.append((z > cut).astype(float))
    return np.column_stack(cols)


def dgp_gpa_tiers(
    n: int = 974,
    tier_sizes: Sequence[int] = (1, 4, 10),
    coefficients: GpaCoefficients = GpaCoefficients(),
    residual_sd: float = 0.5,
    g=None,
    noise: tuple[np.ndarray, np.ndarray] | None = None,
    X: np.ndarray | None = None,
):
    """Tiered covariates (continuous, mixed, binary) and GPA-like outcomes
    truncated to [0, 4] with independent residuals per arm.

    ``X`` and standard-normal ``noise`` may be supplied so that only the
    residual scale changes between calls (used by calibration).
    """
    rng = as_rng(g)
    if X is None:
        X = _gpa_covariates(n, tier_sizes, rng, coefficients.latent_loading)
    n = X.shape[0]
    if len(coefficients.tier_weights) != len(tier_sizes):
        raise DomainError("one tier weight per tier is required")
    Xs = (X - X.mean(axis=0)) / X.std(axis=0, ddof=1)
    beta = np.concatenate(
        [
            w / math.sqrt(k) * np.array([1.0 if j % 2 == 0 else -1.0 for j in range(k)])
            for w, k in zip(coefficients.tier_weights, tier_sizes)
        ]
    )
    mu0 = coefficients.intercept + Xs @ beta + coefficients.quadratic * (Xs[:, 0] ** 2 - 1.0)
    mu1 = mu0 + coefficients.effect + coefficients.interaction * Xs[:, 0]
    if noise is None:
        noise = (rng.standard_normal(n), rng.standard_normal(n))
    y1 = np.clip(mu1 + residual_sd * noise[0], 0.0, 4.0)
    y0 = np.clip(mu0 + residual_sd * noise[1], 0.0, 4.0)
    return X, y1, y0


def realized_r2(X: np.ndarray, y1, y0, r1: float, tier_sizes=None) -> float:
    design = DesignMatrix(X, tier_sizes=tier_sizes)
    return finite_moments(design, y1, y0, r1)[1].r2


def calibrate_residual_sd(
    target_r2: float,
    X: np.ndarray,
    noise: tuple[np.ndarray, np.ndarray],
    r1: float,
    coefficients: GpaCoefficients = GpaCoefficients(),
    tier_sizes: Sequence[int] = (1, 4, 10),
    lo: float = 1e-3,
    hi: float = 20.0,
    tol: float = 1e-4,
) -> float:
    """Residual sd giving realized R^2 closest to ``target_r2`` (bisection
    on log sd; R^2 falls as the residual scale grows)."""
    design = DesignMatrix(X, tier_sizes=tier_sizes)

    def r2(sd):
        _, y1, y0 = dgp_gpa_tiers(coefficients=coefficients, residual_sd=sd, noise=noise, X=X, tier_sizes=tier_sizes)
        return finite_moments(design, y1, y0, r1)[1].r2

    a, b = math.log(lo), math.log(hi)
    if r2(lo) < target_r2:
        return lo
    if r2(hi) > target_r2:
        return hi
    for _ in range(100):
        mid = 0.5 * (a + b)
        if r2(math.exp(mid)) > target_r2:
            a = mid
        else:
            b = mid
        if b - a < tol:
            break
    return math.exp(0.5 * (a + b))


# ---------------------------------------------------------------------------
# studies


@dataclass
class StudyConfig:
    dgp: str = "binary"
    n: int = 1000
    n1: int = 100
    dgp_params: dict = field(default_factory=dict)
    criterion: dict = field(default_factory=lambda: {"criterion": "rem", "p_a": 0.001})
    reps: int = 1000
    ci_reps: int | None = None
    alpha: float = 0.05
    seed: int = 0
    n_mc: int = 100_000
    dist_mc: int = 1_000_000
    workers: int = 1
    target_r2: float | None = None
    max_draws: int | None = None

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.dgp not in ("binary", "binary_additive", "gpa"):
            raise ConfigError(f"unknown dgp {self.dgp!r}")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if not 1 <= self.n1 <= self.n - 1:
            raise ConfigError("n1 must be in [1, n-1]")
        if self.ci_reps is None:
            self.ci_reps = self.reps
        self.ci_reps = min(int(self.ci_reps), self.reps)

    @classmethod
    def from_dict(cls, d: Mapping) -> "StudyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown study keys: {', '.join(sorted(unknown))}")
        return cls(**dict(d))


@dataclass
class Population:
    design: DesignMatrix
    y1: np.ndarray
    y0: np.ndarray
    tau: float
    vtt: float
    r2: float
    rho2: tuple[float, ...]
    residual_sd: float | None = None


def make_population(cfg: StudyConfig, residual_sd: float | None = None) -> Population:
    g = SeededGenerator(cfg.seed).child(0)
    params = dict(cfg.dgp_params)
    r1 = cfg.n1 / cfg.n
    if cfg.dgp in ("binary", "binary_additive"):
        X, y1, y0 = dgp_binary(
            cfg.n,
            K=params.get("K", 3),
            beta1=params.get("beta1", (2.0, 3.0, 4.0)),
            beta0=params.get("beta0", (0.0, 1.0, 1.0)),
            g=g,
            additive=cfg.dgp == "binary_additive",
        )
        tiers = params.get("tier_sizes")
    else:
        tiers = tuple(params.get("tier_sizes", (1, 4, 10)))
        coefs = GpaCoefficients(**params.get("coefficients", {}))
        rng = g.rng
        X = _gpa_covariates(cfg.n, tiers, rng, coefs.latent_loading)
        noise = (rng.standard_normal(cfg.n), rng.standard_normal(cfg.n))
        if residual_sd is None:
            if cfg.target_r2 is not None:
                residual_sd = calibrate_residual_sd(cfg.target_r2, X, noise, r1, coefs, tiers)
            else:
                residual_sd = float(params.get("residual_sd", 0.5))
        _, y1, y0 = dgp_gpa_tiers(coefficients=coefs, residual_sd=residual_sd, noise=noise, X=X, tier_sizes=tiers)
    design = DesignMatrix(X, tier_sizes=tiers)
    pop, v = finite_moments(design, y1, y0, r1)
    if tiers is not None:
        rho = tuple(float(r) for r in tier_correlations(tier_orthogonalize(design), pop, r1)[:-1])
    else:
        rho = (v.r2,)
    return Population(design, y1, y0, pop.tau, v.vtt, v.r2, rho, residual_sd)


@dataclass
class StudyReport:
    criterion: str
    reps: int
    ci_reps: int
    tau: float
    vtt: float
    r2: float
    rho2: tuple[float, ...]
    coverage: float
    coverage_neyman: float
    mean_length: float
    mean_length_neyman: float
    mean_length_neyman_cre: float
    length_reduction: float
    var_rerand: float
    var_cre: float
    var_ratio: float
    var_ratio_se: float
    var_ratio_theory: float
    qr_rerand: float
    qr_cre: float
    qr_theory: float
    ess: float
    ess_theory: float
    ks: float | None
    acceptance_rate: float
    residual_sd: float | None = None
    rows: list = field(default_factory=list, repr=False)

    def to_dict(self, rows: bool = False) -> dict:
        d = asdict(self)
        if not rows:
            d.pop("rows")
        return _jsonable(d)


def effective_sample_size(qr_rerand: float, qr_cre, n: int | None = None) -> float:
    """Percentage increase in sample size a complete randomization needs
    to match ``qr_rerand``.

    ``qr_cre`` is either the CRE quantile range at the same ``n`` (then the
    1/sqrt(n) scaling gives ``(qr_cre / qr_rerand)^2 - 1``) or a
    decreasing function of sample size, solved by bisection.
    """
    if not qr_rerand > 0:
        raise DomainError("quantile range must be positive")
    if not callable(qr_cre):
        return ((qr_cre / qr_rerand) ** 2 - 1.0) * 100.0
    if n is None:
        raise DomainError("n is required with a quantile-range curve")
    lo, hi = float(n), float(n)
    if qr_cre(lo) <= qr_rerand:
        return 0.0
    while qr_cre(hi) > qr_rerand:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if qr_cre(mid) > qr_rerand:
            lo = mid
        else:
            hi = mid
    return (0.5 * (lo + hi) / n - 1.0) * 100.0


def _quantile_range(x: np.ndarray, alpha: float) -> float:
    lo, hi = np.quantile(x, [alpha / 2, 1 - alpha / 2])
    return float(hi - lo)


def _tau_hats(Z: np.ndarray, y1: np.ndarray, y0: np.ndarray, n1: int) -> np.ndarray:
    Zf = Z.astype(float)
    n0 = Z.shape[1] - n1
    return Zf @ y1 / n1 - (1.0 - Zf) @ y0 / n0


def theory_model(pop: Population, criterion: BalanceCriterion) -> AsymptoticModel:
    if isinstance(criterion, ReMT):
        return AsymptoticModel.remt(pop.vtt, pop.rho2, pop.design.tier_sizes, criterion.thresholds)
    if isinstance(criterion, ReM):
        return AsymptoticModel.rem(pop.vtt, pop.r2, pop.design.k, criterion.a)
    raise ConfigError("studies support the rem and remt criteria")


def evaluate_bank(
    cfg: StudyConfig,
    pop: Population,
    criterion: BalanceCriterion,
    bank: AssignmentBank,
) -> StudyReport:
    """Summarize one population against a bank of assignments."""
    n, n1 = cfg.n, cfg.n1
    tau_r = _tau_hats(bank.rerand, pop.y1, pop.y0, n1)
    tau_c = _tau_hats(bank.cre, pop.y1, pop.y0, n1)
    dev_r = tau_r - pop.tau
    dev_c = tau_c - pop.tau

    basis = tier_orthogonalize(pop.design) if pop.design.tier_sizes is not None else None
    rows = []
    cover = cover_ney = 0
    len_sum = len_ney = len_ney_cre = 0.0
    for r in range(cfg.ci_reps):
        z = bank.rerand[r]
        y = np.where(z == 1, pop.y1, pop.y0)
        rep = confidence_interval(
            criterion, y, z, pop.design, cfg.alpha, n_mc=cfg.n_mc, seed=cfg.seed, basis=basis, with_se=False
        )
        zc = bank.cre[r]
        ney_cre = neyman_baseline(np.where(zc == 1, pop.y1, pop.y0), zc, cfg.alpha)
        c_ours = rep.covers(pop.tau)
        c_ney = rep.neyman.lower <= pop.tau <= rep.neyman.upper
        cover += c_ours
        cover_ney += c_ney
        len_sum += rep.length
        len_ney += rep.neyman.length
        len_ney_cre += ney_cre.length
        rows.append(
            {
                "rep": r,
                "tau_hat": rep.tau_hat,
                "tau_hat_cre": float(tau_c[r]),
                "lower": rep.lower,
                "upper": rep.upper,
                "neyman_lower": rep.neyman.lower,
                "neyman_upper": rep.neyman.upper,
                "neyman_cre_length": ney_cre.length,
                "r2_hat": rep.r2_hat,
                "draws": int(bank.draws[r]),
                "covered": bool(c_ours),
                "covered_neyman": bool(c_ney),
            }
        )
    m = max(cfg.ci_reps, 1)
    var_r = float(np.mean(dev_r**2))
    var_c = float(np.mean(dev_c**2))
    # paired bootstrap over replications
    rng = np.random.default_rng(cfg.seed)
    R = dev_r.size
    boots = []
    for _ in range(200):
        idx = rng.integers(0, R, R)
        den = np.mean(dev_c[idx] ** 2)
        boots.append(np.mean(dev_r[idx] ** 2) / den if den > 0 else math.nan)
    model = theory_model(pop, criterion)
    theory_ratio = 1.0 - sum((1.0 - v) * rho for v, rho in zip(model.v, model.rho2))
    qr_r = _quantile_range(tau_r, cfg.alpha)
    qr_c = _quantile_range(tau_c, cfg.alpha)
    ks = None
    qr_theory = math.nan
    if cfg.dist_mc:
        d = build_distribution(model, cfg.dist_mc, seed=cfg.seed)
        ks = ks_distance(math.sqrt(n) * dev_r, d)
        nu = d.quantile(1 - cfg.alpha / 2)
        qr_theory = 2.0 * nu * math.sqrt(pop.vtt / n)
    z_q = gaussian_quantile(1 - cfg.alpha / 2)
    ess_theory = effective_sample_size(qr_theory, 2.0 * z_q * math.sqrt(pop.vtt / n)) if qr_theory == qr_theory else math.nan
    return StudyReport(
        criterion=criterion.label,
        reps=R,
        ci_reps=cfg.ci_reps,
        tau=pop.tau,
        vtt=pop.vtt,
        r2=pop.r2,
        rho2=tuple(pop.rho2),
        coverage=cover / m,
        coverage_neyman=cover_ney / m,
        mean_length=len_sum / m,
        mean_length_neyman=len_ney / m,
        mean_length_neyman_cre=len_ney_cre / m,
        length_reduction=1.0 - len_sum / len_ney_cre if len_ney_cre > 0 else math.nan,
        var_rerand=var_r,
        var_cre=var_c,
        var_ratio=var_r / var_c if var_c > 0 else math.nan,
        var_ratio_se=float(np.std(boots, ddof=1)),
        var_ratio_theory=theory_ratio,
        qr_rerand=qr_r,
        qr_cre=qr_c,
        qr_theory=qr_theory,
        ess=effective_sample_size(qr_r, qr_c) if qr_r > 0 else math.nan,
        ess_theory=ess_theory,
        ks=ks,
        acceptance_rate=bank.acceptance_rate,
        residual_sd=pop.residual_sd,
        rows=rows,
    )


def run_study(cfg: StudyConfig, bank: AssignmentBank | None = None) -> StudyReport:
    """Fixed population, ``cfg.reps`` rerandomizations with paired CRE
    draws, intervals on the first ``cfg.ci_reps`` replications."""
    pop = make_population(cfg)
    criterion = criterion_from_config(cfg.criterion, pop.design)
    if bank is None:
        bank = _bank_or_partial(cfg, pop, criterion)
    return evaluate_bank(cfg, pop, criterion, bank)


def _bank_or_partial(cfg: StudyConfig, pop: Population, criterion: BalanceCriterion) -> AssignmentBank:
    """Assignment bank for a study.  A budget failure aborts the study; the
    error then carries a report on the completed replications as
    ``exc.partial_report`` (None when nothing completed)."""
    try:
        return assignment_bank(
            criterion, pop.design, cfg.n1, cfg.reps, cfg.seed, max_draws=cfg.max_draws, workers=cfg.workers
        )
    except BudgetExhaustedError as exc:
        partial = getattr(exc, "partial_bank", None)
        exc.partial_report = None
        if partial is not None:
            sub = StudyConfig(**{**asdict(cfg), "reps": partial.reps, "ci_reps": min(cfg.ci_reps, partial.reps)})
            exc.partial_report = evaluate_bank(sub, pop, criterion, partial)
        raise


def run_r2_sweep(cfg: StudyConfig, targets: Sequence[float]) -> list[StudyReport]:
    """One covariate matrix and one assignment bank; the outcome residual
    scale is recalibrated for each target R^2."""
    if cfg.dgp != "gpa":
        raise ConfigError("R^2 sweeps need the gpa dgp")
    base = make_population(StudyConfig(**{**asdict(cfg), "target_r2": None}))
    criterion = criterion_from_config(cfg.criterion, base.design)
    bank = _bank_or_partial(cfg, base, criterion)
    out = []
    for t in targets:
        sub = StudyConfig(**{**asdict(cfg), "target_r2": float(t)})
        out.append(evaluate_bank(sub, make_population(sub), criterion, bank))
    return out
