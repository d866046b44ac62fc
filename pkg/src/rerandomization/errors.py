"""Exception hierarchy shared across the package."""


class RerandomizationError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(RerandomizationError, ValueError):
    """An argument lies outside the domain of a function."""


class SingularCovarianceError(RerandomizationError, ValueError):
    """A covariance matrix that must be positive definite is not."""

    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        super().__init__(message)
        self.columns = columns


class DegeneratePopulationError(RerandomizationError, ValueError):
    """V_tautau is zero, so correlations with the covariates are undefined."""


class CriterionError(RerandomizationError):
    """A balance criterion failed validation or raised during evaluation."""


class BudgetExhaustedError(RerandomizationError):
    """Rejection sampling hit its draw budget without an acceptance."""

    def __init__(self, message: str, draws: int, accepted: int):
        super().__init__(message)
        self.draws = draws
        self.accepted = accepted

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.draws if self.draws else 0.0


class AcceptanceStarvationError(RerandomizationError):
    """Too few draws of B ~ N(0, V_xx) land in a general acceptance region."""


class InstanceTooLargeError(RerandomizationError, ValueError):
    """Exhaustive enumeration was requested for too many assignments."""


class ConfigError(RerandomizationError, ValueError):
    """A run or study configuration is malformed."""
