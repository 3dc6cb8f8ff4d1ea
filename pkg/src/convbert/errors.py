"""Exception types raised across the package."""


class ConvBertError(Exception):
    pass


class DimensionError(ConvBertError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ConvBertError, ValueError):
    """A hyperparameter combination is invalid."""


class InputError(ConvBertError, ValueError):
    """Bad user-supplied data (token ids, corpus, sequences)."""


class ContractError(ConvBertError, RuntimeError):
    """An operation was called outside its contract."""


class EvaluationError(ConvBertError, RuntimeError):
    """A function evaluation produced a non-finite value."""


class NonFiniteGradientError(ConvBertError, FloatingPointError):
    """Optimizer step rejected because a gradient is NaN or Inf."""
