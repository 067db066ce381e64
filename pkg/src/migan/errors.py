"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the command-line front end can map
failures to distinct process exit statuses.
"""


class MiganError(Exception):
    exit_code = 1


class MissingPairError(MiganError):
    exit_code = 2


class ShapeMismatchError(MiganError, ValueError):
    exit_code = 3


class InsufficientDataError(MiganError):
    exit_code = 4


class SpecError(MiganError, ValueError):
    exit_code = 5


class CheckpointError(MiganError):
    exit_code = 6


class DomainError(MiganError, ValueError):
    exit_code = 7


class StructureMismatchError(MiganError, ValueError):
    exit_code = 8


class ModeError(MiganError, ValueError):
    exit_code = 9


class WeightsFormatError(MiganError):
    exit_code = 10


class ChecksumError(WeightsFormatError):
    exit_code = 11


class ConfigError(MiganError, ValueError):
    exit_code = 12


class NonFiniteLossError(MiganError, FloatingPointError):
    exit_code = 13

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class DegenerateInputError(MiganError, ValueError):
    exit_code = 14


class SingleClassError(MiganError, ValueError):
    exit_code = 15


class NoPositiveError(SingleClassError):
    exit_code = 16
