"""Exception types shared across the package.

The CLI maps these onto process exit codes (usage 2, IO 3, divergence 4),
so library code should raise the most specific class that applies.
"""


class DarksplatError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(DarksplatError, ValueError):
    """An argument violates a documented precondition."""


class NumericDegeneracyError(DarksplatError, ArithmeticError):
    """A numeric quantity that must be well conditioned is not."""


class ConfigurationError(DarksplatError):
    """A component is missing configuration it needs to run."""


class TrainingDivergedError(DarksplatError):
    """Optimization produced a non-finite loss or gradient.

    Carries the iteration number and the offending parameter group when
    known, so callers can report where training fell over.
    """

    def __init__(self, message, iteration=None, group=None):
        super().__init__(message)
        self.iteration = iteration
        self.group = group


class ParseError(DarksplatError):
    """A file on disk could not be parsed.

    ``path`` names the file; ``line`` (1-based) or ``offset`` (bytes)
    locate the problem when known.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset


class CorruptFileError(ParseError):
    """A binary container is truncated or fails its magic/shape checks."""


class UnsupportedVersionError(ParseError):
    """A file container declares a format version this build cannot read."""
