"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with arguments that break its contract."""


class PreconditionError(ValueError):
    """A stated precondition does not hold for the given inputs."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


class RangeError(ValueError):
    """A raw value lies outside its declared factor range."""


class ParseError(ValueError):
    """A dataset or config file is malformed.

    ``line`` carries the 1-based offending line number when known.
    """

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DegenerateDataError(ValueError):
    """The data cannot support the requested fit (e.g. a single class)."""


class CheckpointLoadError(ValueError):
    """A checkpoint file cannot be loaded (bad magic, version, truncation)."""


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None, epoch=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch
