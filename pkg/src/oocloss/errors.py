"""Exception hierarchy.

Every error raised by the library derives from :class:`OOCError`.  The three
intermediate classes map onto the CLI exit codes (config 2, data 3,
numerical 4).
"""


class OOCError(Exception):
    exit_code = 1


class ConfigError(OOCError, ValueError):
    exit_code = 2


class DataError(OOCError, ValueError):
    exit_code = 3


class NumericalError(OOCError, ArithmeticError):
    exit_code = 4


# -- data_core ---------------------------------------------------------------

class MissingColumn(DataError):
    def __init__(self, column):
        super().__init__(f"column {column!r} not found in header")
        self.column = column


class NonFiniteValue(DataError):
    def __init__(self, row, col):
        super().__init__(f"non-finite or unparsable value at row {row}, column {col!r}")
        self.row = row
        self.col = col


class EmptyDataset(DataError):
    pass


class InvalidConfig(ConfigError):
    pass


class UnknownCluster(DataError):
    pass


class DegenerateSplit(DataError):
    pass


class EmptyPool(DataError):
    pass


# -- learners ----------------------------------------------------------------

class SingularSystem(NumericalError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyEvaluationSet(DataError):
    pass


# -- design ------------------------------------------------------------------

class InvalidP0(ConfigError):
    pass


class OutOfRange(ConfigError):
    pass


class InvalidK(ConfigError):
    pass


class RankDeficientSketch(NumericalError):
    pass


# -- solvers -----------------------------------------------------------------

class TooShort(ConfigError):
    pass


# -- estimators --------------------------------------------------------------

class TooFewSamples(DataError):
    pass


class MissingApproxClusters(DataError):
    pass


class GridTooSmall(ConfigError):
    pass


class InsufficientData(DataError):
    """Fold plan needs more samples than available.

    ``max_n_T`` and ``max_n_T_prime`` report the largest feasible fold
    counts for the requested fold sizes.
    """

    def __init__(self, message, max_n_T=0, max_n_T_prime=0):
        super().__init__(message)
        self.max_n_T = max_n_T
        self.max_n_T_prime = max_n_T_prime
