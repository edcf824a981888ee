"""Exception taxonomy.

Split along the CLI exit-code contract: usage errors (exit 1), data errors
(exit 2), and IO errors (exit 3, plain OSError).
"""


class MergeSpectrumError(Exception):
    """Base for all package errors."""


class UsageError(MergeSpectrumError):
    """Bad flags or invalid parameter combinations at the CLI boundary."""


class DataError(MergeSpectrumError):
    """Malformed or inconsistent input data."""


# --- checkpoint container ---------------------------------------------------

class MalformedHeader(DataError):
    pass


class OverlappingRanges(DataError):
    pass


class DuplicateTensorName(DataError):
    pass


class MissingShard(DataError):
    pass


class UnknownTensor(DataError):
    pass


class UnsupportedDType(DataError):
    pass


class CorruptTensor(DataError):
    """NaN/Inf payload in a stored tensor."""


class ShardLimitExceeded(DataError):
    """A single tensor does not fit in the configured shard size."""


# --- merging ----------------------------------------------------------------

class MergeError(DataError):
    pass


class ShapeMismatch(MergeError):
    pass


class ZeroNormTensor(MergeError):
    pass


class BaseRequired(MergeError):
    """Method needs a base checkpoint and none was supplied."""


class RecipeError(MergeError):
    """Recipe parameter outside its valid range."""


# --- analytics --------------------------------------------------------------

class TensorSetMismatch(DataError):
    """Two checkpoints do not share an identical tensor name/shape set."""


class DegenerateInput(DataError):
    """Statistic undefined for this input (e.g. all-zero delta)."""


class RecordSchemaError(DataError):
    """An evaluation record line violates the schema."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NoTransition(DataError):
    """Accuracy series has no detectable phase change."""


# --- sweeps -----------------------------------------------------------------

class PlanError(DataError):
    pass


class PlanDigestMismatch(PlanError):
    """Resumed manifest was produced by a different plan."""
