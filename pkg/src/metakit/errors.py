"""Exception hierarchy.

Every error raised on purpose by metakit derives from :class:`MetakitError`.
The CLI maps the subclasses onto exit codes, so new error kinds should pick
the closest existing parent.
"""


class MetakitError(Exception):
    """Base class for all metakit errors."""


class SchemaError(MetakitError):
    """Unknown column, duplicate name, or wrong column type."""


class ParseError(MetakitError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(MetakitError):
    """A matrix file does not match the declared format or the dataset."""


class DomainError(MetakitError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NotEstimableError(MetakitError):
    """An effect size or pooled estimate cannot be computed from the input."""


class InsufficientDataError(MetakitError):
    """Too few rows, clusters or groups for the requested model."""


class SingularDesignError(MetakitError):
    """The design matrix is rank deficient."""

    def __init__(self, message, terms=()):
        self.terms = tuple(terms)
        super().__init__(message)


class FactorizationError(MetakitError):
    """A matrix that must be positive definite is not."""

    def __init__(self, message, pivot=None):
        self.pivot = pivot
        super().__init__(message)


class PSDViolationError(MetakitError):
    """A constructed or loaded covariance block is not positive semidefinite."""

    def __init__(self, message, cluster=None):
        self.cluster = cluster
        super().__init__(message)


class ConvergenceError(MetakitError):
    """An optimizer failed to converge."""

    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class CR2AdjustmentError(MetakitError):
    """The CR2 adjustment matrix of a cluster is singular."""

    def __init__(self, message, cluster=None):
        self.cluster = cluster
        super().__init__(message)
