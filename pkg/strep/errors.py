"""Exception hierarchy shared by every module.

Each error carries the process exit code the command line maps it to:
1 for configuration and usage mistakes, 2 for file problems, 3 for numeric failures.
"""


class StrepError(Exception):
    exit_code = 1


class ConfigError(StrepError):
    exit_code = 1


class UsageError(StrepError, ValueError):
    """Shape, dimension or argument misuse of a library call."""

    exit_code = 1


class StrepIOError(StrepError):
    exit_code = 2


class DatasetFormatError(StrepIOError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(StrepError, ArithmeticError):
    exit_code = 3

    def __init__(
        self,
        message: str,
        op: str | None = None,
        iteration: int | None = None,
        term: str | None = None,
    ):
        self.op = op
        self.iteration = iteration
        self.term = term
        super().__init__(message)


class GenerationError(StrepError):
    """The simulator could not produce a valid trajectory or frame."""

    exit_code = 3
