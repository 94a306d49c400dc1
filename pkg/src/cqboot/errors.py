"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failure classes onto process exit statuses: 2 for bad input or
configuration, 3 for numerical failures, 4 for inference quality problems.
"""

from __future__ import annotations


class CQError(Exception):
    exit_code = 1


class InputError(CQError):
    exit_code = 2


class SchemaError(InputError):
    """A required column or model-spec entry is missing."""


class IntegrityError(InputError):
    """Cluster-level fields disagree between rows of the same cluster."""


class DomainError(InputError):
    """A value lies outside its permitted domain."""


class ConfigError(InputError, ValueError):
    """An invalid run configuration (tuning values, replicate counts...)."""


class NumericalError(CQError):
    exit_code = 3


class EstimationError(NumericalError):
    """A stage fit could not be computed."""


class SingularDesignError(EstimationError):
    def __init__(self, message: str, column: int | None = None):
        super().__init__(message)
        self.column = column


class InsufficientDataError(EstimationError):
    """No clusters (or too few observations) enter a stage fit."""


class InferenceError(CQError):
    exit_code = 4


class InferenceFailureError(InferenceError):
    """Too many bootstrap replicates failed to produce estimates."""


class ExperimentError(InferenceError):
    """Too many Monte Carlo runs failed."""
