"""Exception hierarchy shared by every module."""


class TileSparseError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(TileSparseError, ValueError):
    pass


class EmptySearchSpaceError(TileSparseError, ValueError):
    pass


class DomainError(TileSparseError, ValueError):
    """Input outside the mathematical domain of an operation (non-finite, non-stochastic, ...)."""


class InvalidMaskError(TileSparseError, ValueError):
    pass


class DegenerateRowError(TileSparseError, ValueError):
    pass


class MemoryBudgetError(TileSparseError, MemoryError):
    pass


class TrainingDivergedError(TileSparseError, RuntimeError):
    pass


class ConfigError(TileSparseError, ValueError):
    pass
