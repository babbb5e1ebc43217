"""Exception hierarchy.  The CLI maps these onto exit codes."""


class SPFMError(Exception):
    exit_code = 1


class InputError(SPFMError, ValueError):
    """Bad argument value or malformed input data."""


class ConfigError(InputError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class ShapeError(SPFMError):
    """Array dimensions do not chain; usually a corrupted checkpoint."""


class CheckpointError(InputError):
    pass


class NumericError(SPFMError, ArithmeticError):
    exit_code = 2


class TrainingAborted(NumericError):
    """Raised by the training loop with the last finite state attached."""

    def __init__(self, message, *, epoch, batch, params, opt_state, metrics):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch
        self.params = params
        self.opt_state = opt_state
        self.metrics = metrics
