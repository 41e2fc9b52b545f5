"""Exception hierarchy.

Every error raised by the library derives from :class:`PCALError`. The CLI maps
subclasses onto exit codes through the ``exit_code`` attribute.
"""

from __future__ import annotations


class PCALError(Exception):
    """Base class for library errors."""

    exit_code = 1


class DomainError(PCALError, ValueError):
    """Non-finite or otherwise out-of-domain numeric input."""

    exit_code = 2


class InvalidArgument(PCALError, ValueError):
    exit_code = 2


class SchemaError(PCALError, ValueError):
    """A CSV or JSON input does not match the expected layout."""

    exit_code = 2


class ConsistencyError(PCALError, ValueError):
    """A record's preference label contradicts its true outcome."""

    exit_code = 2


class ConfigError(PCALError, ValueError):
    exit_code = 2


class InvalidPolicy(PCALError, ValueError):
    """Propensities do not sum to one, are negative, or break the floor."""

    exit_code = 2


class NearSingularPolicy(InvalidPolicy):
    """A cumulative propensity is too small to divide by."""


class InfeasibleBudget(PCALError, ValueError):
    """No allocation satisfies the budget constraints."""

    exit_code = 3


class InfeasibleAllocation(InfeasibleBudget):
    """A specific allocation violates a named bound."""


class InsufficientData(PCALError, ValueError):
    exit_code = 4


class InsufficientPatternCoverage(InsufficientData):
    """A fold lacks records of a missing pattern that the estimator needs."""


class InconsistentRecord(PCALError, ValueError):
    """A record's observed fields do not match its missing pattern."""

    exit_code = 2
