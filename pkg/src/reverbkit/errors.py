"""Exception hierarchy shared by every stage.

Each class carries the CLI exit code it maps to, so `reverbkit.cli` can
translate any library failure without a lookup table.
"""


class ReverbkitError(Exception):
    exit_code = 2
    code = "error"

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context


class UsageError(ReverbkitError):
    exit_code = 1
    code = "usage"


class ArgumentError(ReverbkitError, ValueError):
    exit_code = 1
    code = "argument"


class DataError(ReverbkitError):
    exit_code = 2
    code = "data"


class FormatError(DataError):
    code = "format"


class UnsupportedError(DataError):
    code = "unsupported"


class EmptyInputError(DataError):
    code = "empty_input"


class LookupFailure(DataError, KeyError):
    code = "lookup"

    def __str__(self):
        return self.message


class StateError(DataError):
    code = "state"


class NumericError(ReverbkitError, ArithmeticError):
    exit_code = 3
    code = "numeric"


class ShapeError(NumericError, ValueError):
    code = "shape"


class SingularityError(NumericError):
    code = "singularity"


class InsufficientDecayError(NumericError):
    code = "insufficient_decay"
