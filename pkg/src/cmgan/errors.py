"""Exception hierarchy shared by every cmgan module."""


class CmGanError(Exception):
    """Base class for all errors raised by cmgan."""


class ShapeError(CmGanError, ValueError):
    pass


class DegenerateBatchError(CmGanError, ValueError):
    pass


class UsageError(CmGanError, RuntimeError):
    pass


class DomainError(CmGanError, ValueError):
    pass


class DivergenceError(CmGanError, FloatingPointError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message, epoch=None, step=None):
        context = []
        if epoch is not None:
            context.append(f"epoch={epoch}")
        if step is not None:
            context.append(f"step={step}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class FormatError(CmGanError, ValueError):
    """Malformed dataset, manifest or checkpoint file."""


class EmptyDatasetError(FormatError):
    pass


class MismatchUnsatisfiableError(CmGanError, ValueError):
    """No instance of a different category exists to serve as a mismatch."""


class StratificationError(CmGanError, ValueError):
    pass


class UndefinedSimilarityError(CmGanError, ValueError):
    pass


class UndefinedAPError(CmGanError, ValueError):
    pass


class ConfigError(CmGanError, ValueError):
    pass


class DimensionMismatchError(CmGanError, ValueError):
    pass
