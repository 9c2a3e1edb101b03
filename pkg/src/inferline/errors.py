"""Exception hierarchy shared across the package."""


class InferlineError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"


class ValidationError(InferlineError, ValueError):
    code = "validation"


class CatalogError(InferlineError, KeyError):
    code = "catalog"

    def __str__(self) -> str:
        # KeyError quotes its argument; keep messages readable
        return str(self.args[0]) if self.args else ""


class ProfileError(InferlineError):
    code = "profile"


class ConfigurationError(InferlineError):
    code = "configuration"


class InfeasibleError(InferlineError):
    """No configuration can meet the SLO.

    ``service_time`` carries the minimal achievable service time when the
    failure comes from the latency floor rather than from capacity.
    """

    code = "infeasible"

    def __init__(self, message: str, service_time: float | None = None, slo: float | None = None):
        super().__init__(message)
        self.service_time = service_time
        self.slo = slo
