"""Exception hierarchy shared by all vdtq modules.

Exit-code mapping used by the CLI: config errors exit 2, numeric/training
errors exit 3, file I/O errors exit 4.
"""


class VdtqError(Exception):
    """Base class for all package errors."""


class ShapeError(VdtqError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(VdtqError):
    """Invalid configuration value or inconsistent run setup."""


class NumericError(VdtqError):
    """Numerical failure: non-finite values, indefinite Hessian, etc."""


class DegenerateStateError(NumericError):
    """A candidate state has zero norm and cannot be scored."""


class TrainingError(NumericError):
    """Calibration diverged or violated an internal invariant."""

    def __init__(self, message: str, epoch: int | None = None, block: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.block = block


class IOFormatError(VdtqError):
    """A file on disk does not match the expected vdtq format."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (NumericError, ShapeError)):
        return EXIT_NUMERIC
    if isinstance(exc, (IOFormatError, OSError)):
        return EXIT_IO
    return 1
