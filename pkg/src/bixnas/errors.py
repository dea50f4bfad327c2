"""Exception hierarchy. CLI exit codes are attached to each class."""


class BixError(Exception):
    exit_code = 1


class ConfigError(BixError, ValueError):
    exit_code = 2


class TopologyError(ConfigError):
    pass


class UsageError(BixError, ValueError):
    exit_code = 2


class DataError(BixError, ValueError):
    exit_code = 2


class NumericError(BixError, ArithmeticError):
    exit_code = 3


class TrainingError(NumericError):
    pass


class ArtifactIOError(BixError, OSError):
    exit_code = 4
