"""Exception types shared across the package."""


class PacrError(Exception):
    """Base class for all package errors."""


class DegenerateTrajectoryError(PacrError):
    """A rollout with no reasoning steps (empty emission or T = 0)."""


class NumericalDomainError(PacrError):
    """A log-probability that is positive or NaN."""


class StructuralError(PacrError):
    """A prefix or trajectory that the environment cannot produce."""


class NullConditioningError(PacrError):
    """Conditioning on an event of probability zero."""


class SupportError(PacrError):
    """A trajectory token with zero probability under the policy."""


class ConfigError(PacrError):
    """Invalid configuration value."""


class SchemaError(PacrError):
    """A log or judgment record violating the documented schema."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingConfidenceError(PacrError):
    """A trajectory reached reward shaping without a confidence series."""
