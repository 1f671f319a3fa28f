"""Exception hierarchy shared by every fedreview module.

The CLI maps these onto process exit codes, so each class carries one.
"""

from __future__ import annotations


class FedReviewError(Exception):
    exit_code = 1


class ConfigError(FedReviewError, ValueError):
    exit_code = 1


class DimensionError(FedReviewError, ValueError):
    exit_code = 1


class NumericError(FedReviewError, ArithmeticError):
    exit_code = 3


class InputError(FedReviewError, ValueError):
    exit_code = 1


class StateError(FedReviewError, ValueError):
    """A serialized adapter state does not match the expected layout."""

    exit_code = 2


class DataError(FedReviewError, ValueError):
    exit_code = 2


class FormatError(DataError):
    pass


class CapacityError(DataError):
    pass


class TrainingError(FedReviewError, RuntimeError):
    exit_code = 3


class AggregationError(TrainingError):
    pass


class ProtocolError(FedReviewError):
    exit_code = 4


class TransportError(FedReviewError, OSError):
    exit_code = 4
