"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """Input violates an operation's preconditions (shape, range, config)."""


class GraphConsumed(RuntimeError):
    """A compute graph was asked to run backward a second time."""


class NonFinite(FloatingPointError):
    """An operation produced NaN or Inf."""


class TrainingFailure(RuntimeError):
    def __init__(self, epoch, message="loss diverged"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class DegenerateGradient(ArithmeticError):
    """Gradient has zero L1 norm, so the momentum update is undefined."""


class UndefinedMetric(ArithmeticError):
    pass


class ParseError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset
