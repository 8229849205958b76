"""Exception types shared across the package.

Each class carries the process exit code the command line maps it to.
"""


class DICError(Exception):
    exit_code = 1


class ConfigError(DICError, ValueError):
    """Invalid configuration value, out-of-range argument or unusable setting."""

    exit_code = 2


class ShapeError(DICError, ValueError):
    """Tensor or image with the wrong geometry."""

    exit_code = 3


class FormatError(DICError, ValueError):
    """Malformed compressed file, checkpoint or latent code."""

    exit_code = 3


class CorruptionError(FormatError):
    """Framing is valid but the payload length does not match the header."""


class NumericError(DICError, ArithmeticError):
    """Non-finite values or inputs outside their numeric domain."""

    exit_code = 4
