"""Exception and warning classes shared across the package."""


class ProfileQMError(Exception):
    """Base class for all package errors."""


# data model / ingestion
class MissingColumn(ProfileQMError):
    pass


class NonBinaryValueInBinaryColumn(ProfileQMError):
    pass


class EmptyPractice(ProfileQMError):
    pass


class EmptyDataset(ProfileQMError):
    pass


class ParseError(ProfileQMError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message if line is None else f"line {line}, column {column!r}: {message}")
        self.line = line
        self.column = column


class SchemaViolation(ProfileQMError):
    pass


class DuplicatePatientId(ProfileQMError):
    pass


class ConfigError(ProfileQMError):
    pass


# transform
class DegenerateCovariance(ProfileQMError):
    pass


class TooFewRows(ProfileQMError):
    pass


class ColumnMismatch(ProfileQMError):
    pass


# solver
class Infeasible(ProfileQMError):
    """No nonnegative weights satisfy the balance constraints."""


class NumericalFailure(ProfileQMError):
    pass


# estimators
class MissingOutcome(ProfileQMError):
    pass


class SingularDesign(ProfileQMError):
    pass


class NotLinearEstimator(ProfileQMError):
    pass


class DegenerateVariance(ProfileQMError):
    pass


# metrics
class NoCompleteCells(ProfileQMError):
    pass


class MismatchedPracticeSets(ProfileQMError):
    pass


class RankDeficientConstraints(UserWarning):
    """Dependent balance constraints were dropped before solving."""


class RankDeficientDesign(UserWarning):
    """Dependent regression columns were dropped before fitting."""


class AllWeightsTruncatedToZero(UserWarning):
    """Truncation left a practice with no positive weight; uniform weights used."""


class ZeroVarianceCovariate(UserWarning):
    pass
