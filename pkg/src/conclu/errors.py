"""Exception hierarchy shared across the package.

Every failure mode the library can surface maps to one of these classes so
callers (and the CLI exit-code mapping) can distinguish config/usage errors
from runtime/numeric ones.
"""


class ConCluError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ConCluError):
    """Invalid configuration value, unknown option, or inconsistent setup."""


class ShapeError(ConCluError):
    """Array dimensions do not satisfy an operation's contract."""


class NumericError(ConCluError):
    """Non-finite values where finite ones are required."""


class DegenerateNormError(ConCluError):
    """A vector that must be normalized has (near-)zero norm."""


class DegenerateCloudError(ConCluError):
    """A point cloud is degenerate (e.g. all points identical)."""


class DeadPrototypeError(ConCluError):
    """A prototype's soft assignment mass collapsed to (near) zero.

    Carries the offending prototype index so training can surface a
    diagnosable event instead of a silent NaN.
    """

    def __init__(self, index, mass):
        self.index = int(index)
        self.mass = float(mass)
        super().__init__(f"prototype {self.index} has column mass {self.mass:.3e}")


class CropError(ConCluError):
    """Cropping would leave too few surviving points."""


class ParseError(ConCluError):
    """A text file (XYZ, OFF, manifest) failed to parse.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointFormatError(ConCluError):
    """Checkpoint bytes do not match the expected format or version."""


class ScaleError(ConCluError):
    """Problem size exceeds what an exact/enumeration method supports."""


class BatchTooSmallError(ConCluError):
    """Batch statistics requested over fewer than two samples."""


class EmptyInputError(ConCluError):
    """An operation received an empty collection."""


class TapeError(ConCluError):
    """Misuse of a differentiation tape (e.g. backward run twice)."""
