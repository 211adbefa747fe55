"""Exception types shared across the package.

The CLI maps each class to a distinct exit status.
"""


class CDDError(Exception):
    exit_code = 1


class ConfigError(CDDError, ValueError):
    exit_code = 2


class DataError(CDDError, ValueError):
    exit_code = 3


class DivergenceError(CDDError, RuntimeError):
    exit_code = 4

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class CheckpointError(CDDError, FileNotFoundError):
    exit_code = 3
