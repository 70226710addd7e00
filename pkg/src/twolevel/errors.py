"""Exception types shared across the package."""


class TwoLevelError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TwoLevelError):
    """Operands have incompatible shapes."""


class NumericError(TwoLevelError):
    """An operation produced NaN or Inf; never propagated silently."""


class ContractError(TwoLevelError):
    """A caller violated an operation's precondition."""


class ConfigError(TwoLevelError):
    """Inconsistent or invalid configuration."""


class ParseError(TwoLevelError):
    """A corpus file line could not be parsed."""


class IntegrityError(TwoLevelError):
    """Corpus contents disagree with their manifest."""


class DegenerateAggregateError(TwoLevelError):
    """Average aggregation collapsed to a near-zero vector."""


class TrainingAborted(TwoLevelError):
    """Training stopped on a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, step: int, loss_history: list[float]):
        super().__init__(message)
        self.step = step
        self.loss_history = loss_history
