"""Design and analysis of rerandomized treatment-control experiments."""

from .asymptotics import (
    AsymptoticModel,
    MixtureDistribution,
    RegModel,
    asymptotic_variance,
    build_distribution,
    density_L,
    mc_quantile,
    priasv,
    quantile_range,
    sample_L,
    v_coeff,
)
from .criteria import (
    BalanceDiagnostics,
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
from .errors import (
    AcceptanceStarvationError,
    BudgetExhaustedError,
    ConfigError,
    CriterionError,
    DegeneratePopulationError,
    DomainError,
    InstanceTooLargeError,
    RerandomizationError,
    SingularCovarianceError,
)
from .inference import AnalysisReport, confidence_interval, estimate_vtt_r2, neyman_baseline
from .population import (
    Assignment,
    DesignMatrix,
    finite_moments,
    squared_multiple_correlation,
    tier_correlations,
    tier_orthogonalize,
)
from .sampler import assignment_bank, draw_cre, enumerate_exact, rerandomize
from .simulate import StudyConfig, run_r2_sweep, run_study
from .specialfn import SeededGenerator, chi2_cdf, chi2_quantile

__version__ = "0.1.0"
