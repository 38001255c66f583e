"""Exception types shared across the package."""


class CamNetError(Exception):
    """Base class for all package errors."""


class ShapeError(CamNetError, ValueError):
    """Tensor shapes or resolutions do not satisfy an operation's contract."""


class ConfigError(CamNetError, ValueError):
    """Invalid configuration value."""


class ContractError(CamNetError, RuntimeError):
    """A precondition that is not about shapes was violated."""


class InsufficientSamplesError(CamNetError, ValueError):
    pass


class TrainingError(CamNetError, RuntimeError):
    """Numerical failure during optimisation (non-finite loss or gradient)."""
