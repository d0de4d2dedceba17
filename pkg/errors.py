"""
Exception types shared by every stage of the motion pipeline, plus the
mapping from exception to command-line exit status.
"""

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class MotionError(Exception):
    """Base class for every error raised on purpose by this package"""
    exit_code = EXIT_CONFIG


class ConfigError(MotionError, ValueError):
    exit_code = EXIT_CONFIG


class NumericalFailure(MotionError, ArithmeticError):
    """A non-finite value appeared while updating an online predictor"""
    exit_code = EXIT_NUMERICAL

    def __init__(self, step, detail='non-finite value'):
        self.step = step
        self.detail = detail
        super().__init__(f"numerical failure at step {step}: {detail}")


class VolumeIOError(MotionError, OSError):
    exit_code = EXIT_IO


class MalformedHeaderError(VolumeIOError):
    pass


class TruncatedPayloadError(VolumeIOError):
    pass


class DimensionMismatchError(VolumeIOError):
    pass


class PyramidTooDeepError(MotionError, ValueError):
    exit_code = EXIT_CONFIG


class DegenerateSignalError(MotionError, ValueError):
    """Zero variance where a normalisation or correlation needs spread"""
    exit_code = EXIT_NUMERICAL

    def __init__(self, message, column=None):
        self.column = column
        super().__init__(message)


class LengthMismatchError(MotionError, ValueError):
    exit_code = EXIT_CONFIG


class EmptyInputError(MotionError, ValueError):
    exit_code = EXIT_CONFIG


class StageError(MotionError):
    """Wraps the failure of one pipeline stage, keeping the stage name"""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code_for(cause)
        super().__init__(f"stage '{stage}' failed: {cause}")


def exit_code_for(exc):
    if exc is None:
        return EXIT_OK
    if isinstance(exc, MotionError):
        return exc.exit_code
    if isinstance(exc, (OSError, FileNotFoundError)):
        return EXIT_IO
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERICAL
    return EXIT_CONFIG
