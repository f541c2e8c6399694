"""Exception hierarchy shared by every module."""


class DragError(Exception):
    """Base class for all package errors."""


class DimensionError(DragError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DragError, ValueError):
    """A precondition on arguments was violated."""


class StaleGraphError(DragError, RuntimeError):
    """backward() was called on a graph that has already been consumed."""


class DeterminismError(DragError, RuntimeError):
    """A function expected to be deterministic returned different values."""


class FormatError(DragError, ValueError):
    """A file on disk does not conform to its documented layout."""


class GenerationError(DragError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class DivergenceError(DragError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, stage, epoch, term):
        super().__init__(f"non-finite {term} loss in stage {stage!r}, epoch {epoch}")
        self.stage = stage
        self.epoch = epoch
        self.term = term
