"""Exception types shared across normlab."""


class NormlabError(Exception):
    pass


class DimensionError(NormlabError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(NormlabError, ValueError):
    """An operation parameter is outside its valid range."""


class DataError(NormlabError, ValueError):
    """Input data violates an operation's precondition."""


class FormatError(DataError):
    """A binary dataset file is malformed."""


class NumericError(NormlabError, ArithmeticError):
    pass


class UsageError(NormlabError, RuntimeError):
    pass


class ConfigError(NormlabError, ValueError):
    pass


class Divergence(NormlabError, ArithmeticError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss
