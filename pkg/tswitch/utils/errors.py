"""
Exception hierarchy shared by every module. Each error carries the process exit
code the command line front end should return, and file-format errors carry a
short string code so callers (and tests) can tell them apart.
"""


class TSwitchError(Exception):
    exit_code = 3
    code = "TSW_ERROR"

    def __init__(self, message, code=None):
        super(TSwitchError, self).__init__(message)
        if code is not None:
            self.code = code


class UserError(TSwitchError):
    """Bad flags or violated preconditions (exit 1)."""

    exit_code = 1
    code = "USER"


class DataError(TSwitchError):
    """Corrupt, truncated or missing input files (exit 2)."""

    exit_code = 2
    code = "DATA"


class InvariantError(TSwitchError):
    """An internal invariant was violated (exit 3)."""

    exit_code = 3
    code = "INVARIANT"


# preconditions


class AlphaRangeError(UserError):
    code = "ALPHA_RANGE"


class FingerprintMismatchError(UserError):
    code = "FINGERPRINT"


class DimensionMismatchError(UserError):
    code = "DIMENSION"


class EmptyInputError(UserError):
    code = "EMPTY"


class SimplexError(UserError):
    code = "SIMPLEX"


# file formats


class MagicMismatchError(DataError):
    code = "MAGIC"


class TruncatedFileError(DataError):
    code = "TRUNCATED"


class DuplicateNameError(DataError):
    code = "DUPLICATE_NAME"


class ShapeMismatchError(DataError):
    code = "SHAPE"


class DtypeError(DataError):
    code = "DTYPE"


class NonFiniteError(DataError):
    code = "NON_FINITE"


class PopcountMismatchError(DataError):
    code = "POPCOUNT"


class TrailingBytesError(DataError):
    code = "TRAILING"


# runtime


class TrainingDivergedError(InvariantError):
    code = "DIVERGED"
