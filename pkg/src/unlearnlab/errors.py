"""Exception types shared across the package."""


class UnlearnLabError(Exception):
    pass


class DimensionError(UnlearnLabError, ValueError):
    pass


class ContractError(UnlearnLabError, ValueError):
    pass


class LabelError(UnlearnLabError, ValueError):
    pass


class DegenerateBatchError(UnlearnLabError, ValueError):
    pass


class NumericError(UnlearnLabError, ArithmeticError):
    pass


class DivergenceError(UnlearnLabError, ArithmeticError):
    """Raised when a training objective becomes non-finite or explodes.

    ``state`` holds the last parameters reached before the failure when the
    caller wants to report them instead of discarding the run.
    """

    def __init__(self, message, epoch=None, batch=None, state=None, seconds=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.state = state
        self.seconds = seconds


class ConfigError(UnlearnLabError, ValueError):
    pass


class FormatError(UnlearnLabError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(UnlearnLabError, ValueError):
    pass


class EmissionError(UnlearnLabError, RuntimeError):
    pass
