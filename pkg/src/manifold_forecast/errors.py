"""Exception hierarchy shared by every module of the package."""


class ManifoldForecastError(Exception):
    """Base class for all package errors."""


class DataError(ManifoldForecastError, ValueError):
    """Malformed input data (CSV schema violations, bad dates, non-positive prices).

    ``row`` is the 1-based line number in the offending file when known.
    """

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConfigError(ManifoldForecastError, ValueError):
    """Invalid pipeline, preset or backtest configuration."""


class NumericalError(ManifoldForecastError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class DisconnectedGraphError(NumericalError):
    def __init__(self, index):
        super().__init__(f"kernel graph node {index} has zero degree")
        self.index = index


class RankDeficientError(NumericalError):
    def __init__(self, rank, n_columns):
        super().__init__(
            f"design matrix is rank deficient: rank {rank} < {n_columns} columns"
        )
        self.rank = rank
        self.n_columns = n_columns


class FactorizationError(NumericalError):
    """Cholesky factorization failed even after the full jitter ladder."""

    def __init__(self, jitter):
        super().__init__(f"Cholesky factorization failed (last jitter tried: {jitter:.3e})")
        self.jitter = jitter


class IllConditionedError(NumericalError):
    """RBF interpolation matrix is numerically singular."""

    def __init__(self, condition):
        super().__init__(f"interpolation matrix is ill-conditioned (cond ~ {condition:.3e})")
        self.condition = condition


class DuplicateNeighborsError(NumericalError):
    """Two of the nearest neighbors used for an RBF lift coincide in embedded space."""

    def __init__(self, first, second):
        super().__init__(f"reference points {first} and {second} coincide; RBF system is singular")
        self.pair = (first, second)
