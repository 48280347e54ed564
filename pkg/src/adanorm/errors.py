"""Exception types shared across the package."""


class AdanormError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(AdanormError):
    """Invalid configuration value, combination, or shape contract."""


class DataError(AdanormError):
    """Input data violates a documented precondition."""


class FormatError(AdanormError):
    """On-disk artifact does not match its format contract.

    Carries the byte offset at which the violation was detected when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(AdanormError):
    """Operation requires state that has not been initialized."""


class TrainingError(AdanormError):
    """Training aborted; the last good model and history are attached."""

    def __init__(self, message, best_model=None, history=None):
        super().__init__(message)
        self.best_model = best_model
        self.history = history
