"""Exception types shared across the package."""


class CvaeGanError(Exception):
    pass


class DimensionError(CvaeGanError, ValueError):
    """Tensor shapes do not agree along a named axis."""


class ConfigurationError(CvaeGanError, ValueError):
    pass


class ContractError(CvaeGanError, RuntimeError):
    """A caller broke an operation precondition (e.g. backward on a non-scalar)."""


class DegenerateBatchError(CvaeGanError, ValueError):
    pass


class InsufficientDataError(CvaeGanError, ValueError):
    pass


class FormatError(CvaeGanError, ValueError):
    """Malformed binary or text file. ``offset`` is the byte position, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteLossError(CvaeGanError, FloatingPointError):
    def __init__(self, message, epoch=None, minibatch=None):
        super().__init__(message)
        self.epoch = epoch
        self.minibatch = minibatch
