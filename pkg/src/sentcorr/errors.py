"""Exception types shared across the package.

Each class carries the process exit status the CLI reports for it.
"""


class SentcorrError(Exception):
    exit_code = 1


class ConfigError(SentcorrError, ValueError):
    """Bad setting: unknown key, unparsable value, out-of-range hyperparameter."""

    exit_code = 1


class InputFormatError(SentcorrError, ValueError):
    """Malformed input file or out-of-range input data."""

    exit_code = 2

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class NumericalError(SentcorrError, ArithmeticError):
    """Non-finite loss or gradient."""

    exit_code = 3


class NonFiniteGradientError(NumericalError):
    def __init__(self, tensor_name):
        self.tensor_name = tensor_name
        super().__init__(f"non-finite gradient in tensor {tensor_name!r}")


class CheckpointError(SentcorrError):
    exit_code = 2


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class NumericalWarning(RuntimeWarning):
    pass
