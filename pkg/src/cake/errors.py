"""Exception types raised across the package."""


class CakeError(Exception):
    """Base class for all package errors."""


class DimensionError(CakeError, ValueError):
    pass


class InfeasibleSizesError(CakeError, ValueError):
    pass


class ScmError(CakeError, ValueError):
    pass


class NonFiniteError(CakeError, FloatingPointError):
    """A NaN or Inf appeared; ``op`` names the operation that produced it."""

    def __init__(self, op, detail=""):
        self.op = op
        super().__init__(f"non-finite values in {op}" + (f": {detail}" if detail else ""))


class StaleCacheError(CakeError, RuntimeError):
    pass


class UntrainedModelError(CakeError, RuntimeError):
    pass


class SealedSampleError(CakeError, RuntimeError):
    pass


class ConfigError(CakeError, ValueError):
    pass
