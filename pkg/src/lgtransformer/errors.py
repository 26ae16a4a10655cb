"""Exception types raised across the package."""


class LGError(Exception):
    """Base class for every error raised by lgtransformer."""


class ShapeError(LGError, ValueError):
    pass


class BroadcastError(ShapeError):
    pass


class AxisError(LGError, ValueError):
    pass


class PartitionError(ShapeError):
    """Spatial extent not divisible by the window size."""


class ConfigError(LGError, ValueError):
    pass


class ContractError(LGError, ValueError):
    pass


class TapeError(LGError, RuntimeError):
    pass


class NonFiniteError(LGError, ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs (debug mode only)."""


class DivergenceError(LGError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""
