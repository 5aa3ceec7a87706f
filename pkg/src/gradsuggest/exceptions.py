"""Exception hierarchy.

Every error raised for bad data, bad configuration or a violated contract
derives from :class:`GradSuggestError`; the CLI maps those to exit code 1.
"""


class GradSuggestError(Exception):
    """Base class for all domain errors."""


class DimensionError(GradSuggestError, ValueError):
    """Operand shapes are incompatible."""


class UnsupportedOpError(GradSuggestError, NotImplementedError):
    pass


class ContractViolation(GradSuggestError, ValueError):
    """A documented precondition does not hold."""


class StaleTapeError(GradSuggestError):
    """A tensor was not recorded on the tape it is being differentiated on."""


class NumericError(GradSuggestError, ArithmeticError):
    pass


class EmptyInputError(GradSuggestError, ValueError):
    pass


class DegenerateInputError(GradSuggestError, ValueError):
    pass


class PoolExhaustedError(GradSuggestError):
    """Fewer candidates remain than were requested."""

    def __init__(self, message, shortfall=None):
        super().__init__(message)
        self.shortfall = shortfall


class MissingSampleError(GradSuggestError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing sample"


class ConfigError(GradSuggestError, ValueError):
    pass


class FormatError(GradSuggestError):
    """Malformed on-disk file; ``offset`` points at the offending byte when known."""

    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where += f" in {path}"
        if offset is not None:
            where += f" at offset {offset}"
        super().__init__(message + where)
        self.path = path
        self.offset = offset


class TruncationError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class MissingManifestError(FormatError, FileNotFoundError):
    pass
