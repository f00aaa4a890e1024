"""Exception hierarchy shared by every stage of the engine.

Exit-code contract for the CLI: 0 ok, 2 usage/config, 3 data,
4 bridge, 5 numeric.
"""


class IdforgeError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ConfigError(IdforgeError):
    """Invalid configuration value or missing required option."""

    exit_code = 2


class UsageError(IdforgeError):
    """Malformed CLI invocation."""

    exit_code = 2


class DataError(IdforgeError):
    """Invalid or insufficient input data."""

    exit_code = 3


class ShapeError(DataError):
    """Dimension or index mismatch between arrays."""


class DomainError(DataError):
    """Input outside the mathematical domain (e.g. zero vector for cosine)."""


class InsufficientDataError(DataError):
    """Operation needs more rows than were supplied."""


class RankError(DataError):
    """Requested rank exceeds what the data supports."""

    def __init__(self, message, achievable_rank=None):
        super().__init__(message)
        self.achievable_rank = achievable_rank


class FormatError(DataError):
    """Malformed file on disk (IDV1, PGM/PPM, manifest)."""


class ExhaustionError(DataError):
    """Candidate budget ran out before the sampler hit its target.

    Carries the partial pool so callers can inspect or persist it.
    """

    def __init__(self, message, pool=None, stats=None):
        super().__init__(message)
        self.pool = pool
        self.stats = stats


class BridgeError(IdforgeError):
    """Base class for external-adapter failures."""

    exit_code = 4


class BridgeTimeoutError(BridgeError):
    """Adapter process exceeded its wall-clock budget."""


class BridgeExitError(BridgeError):
    """Adapter exited nonzero; captured stderr attached."""

    def __init__(self, message, returncode=None, stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class BridgeIncompleteError(BridgeError):
    """Adapter produced fewer outputs than inputs."""

    def __init__(self, message, missing_index=None):
        super().__init__(message)
        self.missing_index = missing_index


class BridgeFormatError(BridgeError):
    """Adapter output exists but cannot be parsed."""


class NumericError(IdforgeError):
    """NaN/Inf or other numerical breakdown during computation."""

    exit_code = 5


class FactorizationError(NumericError):
    """Cholesky failed even after the jitter ladder."""


class ConstraintError(NumericError):
    """Similarity constraint unreachable after resampling and shrinking."""


class BudgetError(NumericError):
    """Evaluation budget exceeded (finite-difference mode)."""
