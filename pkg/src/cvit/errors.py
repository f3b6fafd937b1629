"""Exception hierarchy shared across the package, mapped to CLI exit codes."""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CvitError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CvitError):
    """Operand shapes are incompatible; the message names both shapes."""


class DomainError(CvitError):
    """A primitive was evaluated at an invalid point (log of <= 0, divide by 0, overflow)."""


class TapeError(CvitError):
    """Gradient tape misuse: backward without a tape, or replaying a consumed tape."""


class ConfigError(CvitError):
    """Invalid configuration detected before any work starts."""


class DataError(CvitError):
    """Malformed or missing dataset content (labels, manifests, files)."""


class NumericError(CvitError):
    """Non-finite values where finite ones are required (gradients, losses)."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the documented process exit code."""
    if isinstance(exc, (ConfigError,)):
        return EXIT_USAGE
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (NumericError, DomainError, ShapeError, TapeError)):
        return EXIT_NUMERIC
    return 1
