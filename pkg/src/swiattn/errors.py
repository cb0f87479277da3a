"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class DegenerateRowError(ValueError):
    """A softmax row has every entry masked out."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class IncompatibleDonorError(ValueError):
    """Checkpoint or donor model does not match the requested configuration."""


class CheckpointError(IOError):
    """Checkpoint file is unreadable, truncated, corrupted or of an unknown version."""


class SessionStateError(RuntimeError):
    """Inference session used out of order."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
