"""Exception types raised across the toolkit."""


class WmtractError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(WmtractError, ValueError):
    """Array or volume dimensions do not agree."""


class FormatError(WmtractError, ValueError):
    """A file is not in the expected format."""


class UnsupportedError(WmtractError, ValueError):
    """A recognised but unsupported file feature (e.g. datatype code)."""


class NumericError(WmtractError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConditioningError(WmtractError, ValueError):
    """A linear system is rank deficient."""


class DegenerateError(WmtractError, ValueError):
    """Statistic undefined for the given input (e.g. zero variance)."""


class DomainError(WmtractError, ValueError):
    """An evaluation domain is empty."""


class EmptyTractError(WmtractError, ValueError):
    """A segmentation selects no voxels."""


class InsufficientDataError(WmtractError, ValueError):
    """Too few samples for the requested statistic."""


class SpecError(WmtractError, ValueError):
    """An invalid phantom or network specification."""


class DatasetError(WmtractError, IOError):
    """A dataset entry could not be loaded."""


class ConfigError(WmtractError, ValueError):
    """Invalid run configuration. ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
