"""Exception hierarchy. Each class knows the process exit code it maps to."""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5


class GsirError(Exception):
    exit_code = EXIT_USAGE


class InvalidParameterError(GsirError, ValueError):
    pass


class ShapeMismatchError(GsirError, ValueError):
    pass


class StageBudgetError(GsirError):
    pass


class EmptyCorpusError(GsirError):
    pass


class NumericalError(GsirError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class ConfigError(GsirError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ImageFormatError(GsirError):
    exit_code = EXIT_FORMAT


class BitstreamError(GsirError):
    exit_code = EXIT_FORMAT


class BadMagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    pass


class TruncatedPayloadError(BitstreamError):
    pass
