"""Exception types shared across the package."""


class CellBridgeError(Exception):
    """Base class for all package-specific errors."""


class InvalidDataError(CellBridgeError):
    """Input data violates a structural contract (negative expression, bad shapes...)."""


class InsufficientDataError(CellBridgeError):
    """Not enough observations to compute the requested statistic."""


class NumericError(CellBridgeError):
    """A non-finite value appeared during numerical computation."""


class TrainingStepError(CellBridgeError):
    """A training step could not make progress (e.g. every sample was skipped)."""
