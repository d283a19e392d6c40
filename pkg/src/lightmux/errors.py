"""Exception types raised across the package."""


class LightmuxError(Exception):
    """Base class for all package errors."""


class ParameterError(LightmuxError, ValueError):
    """An argument is outside its valid domain."""


class ModelLoadError(LightmuxError, OSError):
    """A model directory could not be read."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path


class ConsistencyError(LightmuxError, ValueError):
    """On-disk metadata disagrees with the data it describes."""


class DegenerateFitError(LightmuxError, ValueError):
    """A fit has no unique solution for the given observations."""


class ConditioningError(LightmuxError, ArithmeticError):
    """A normal matrix is singular or too ill-conditioned to invert."""


class StratificationError(ParameterError):
    """A class has too few samples for a stratified split."""


class ContainerError(LightmuxError, ValueError):
    """A serialized classifier is the wrong version or layout."""
