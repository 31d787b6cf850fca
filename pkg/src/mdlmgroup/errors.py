"""Exception hierarchy.

Every error raised on purpose by this package derives from :class:`MdlmError`.
The two intermediate classes map onto CLI exit codes: validation problems
(bad inputs, mismatched shapes, malformed files) exit with 1, numerical or
runtime failures exit with 2.
"""


class MdlmError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ValidationError(MdlmError, ValueError):
    exit_code = 1


class NumericalError(MdlmError, ArithmeticError):
    exit_code = 2


# distributions
class NotPositiveDefinite(NumericalError):
    pass


class DofTooSmall(ValidationError):
    pass


# filtering / group / samplers
class NonFinite(NumericalError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyGroup(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class DesignMismatch(ValidationError):
    pass


class EmptyTrajectorySet(ValidationError):
    pass


# cluster / simulate
class VoxelOutsideMask(ValidationError):
    pass


class OutOfBounds(ValidationError, IndexError):
    pass


class RegionOutsideVolume(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class ConfigError(ValidationError):
    """Invalid run configuration; ``field`` holds the dotted path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


# io
class FormatError(ValidationError):
    """Malformed file. ``field`` names the offending header field or column."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class BadMagic(FormatError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class MissingColumn(FormatError):
    pass


class UnparsableRow(FormatError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}", message)
