"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class AnchorsetError(Exception):
    exit_code = 1


class ConfigError(AnchorsetError, ValueError):
    """Invalid configuration or arguments."""

    exit_code = 1


class DataError(AnchorsetError, ValueError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SplitError(DataError):
    pass


class SamplerError(DataError):
    pass


class AggregationError(DataError):
    pass


class AnchorRegistryError(DataError, KeyError):
    def __str__(self):
        # KeyError would otherwise repr() the message
        return str(self.args[0]) if self.args else ""


class DegenerateBatchError(DataError):
    pass


class TrainingAbort(AnchorsetError, RuntimeError):
    """Raised when a loss turns non-finite."""

    exit_code = 3

    def __init__(self, message, epoch=None, iteration=None):
        self.epoch = epoch
        self.iteration = iteration
        super().__init__(message)


class CheckpointError(AnchorsetError, OSError):
    exit_code = 4
