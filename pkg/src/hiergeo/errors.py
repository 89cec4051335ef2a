"""Exception types shared across the package."""


class HiergeoError(Exception):
    """Base class for all package errors."""


class ConfigError(HiergeoError, ValueError):
    """A configuration value violates its invariants."""


class InputError(HiergeoError, ValueError):
    """An input value is malformed or out of range."""


class DegenerateInputError(InputError):
    """Input that has no meaningful result, e.g. a zero vector to normalize."""


class ShapeError(HiergeoError, ValueError):
    """Array dimensions do not agree."""


class FormatError(HiergeoError, ValueError):
    """A file could not be parsed."""


class TrainingDivergedError(HiergeoError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"training diverged at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
