"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """A solver or estimator was configured with unusable parameters."""


class ScenarioFormatError(ValueError):
    """A scenario file does not conform to the documented JSON schema."""


class ConvergenceError(RuntimeError):
    """A numerical routine failed to converge within its iteration budget."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SingularityError(ConvergenceError):
    """An ODE right-hand side was evaluated at a vanishing profit margin."""
