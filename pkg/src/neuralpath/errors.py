"""Exception hierarchy shared by every module.

The CLI maps each family onto an exit code, so new errors should subclass
one of the four roots below rather than ``Exception`` directly.
"""


class NeuralPathError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class StructuralError(NeuralPathError, ValueError):
    """Malformed path/document structure (bad lengths, shapes, formats)."""

    exit_code = 2


class ConfigError(NeuralPathError):
    """Bad or missing configuration, or a referenced artifact is absent."""

    exit_code = 2


class BackendError(NeuralPathError):
    """A model backend (diffusion, feature extractor, rasterizer) is unavailable."""

    exit_code = 3


class NumericError(NeuralPathError, ArithmeticError):
    """NaN/inf encountered during optimization or training."""

    exit_code = 4

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FitError(NeuralPathError, ValueError):
    """Contour fitting failed (degenerate input)."""

    exit_code = 4


class DatasetError(NeuralPathError):
    """Dataset construction failed (empty corpus, unreadable container)."""

    exit_code = 2


class MetricError(NeuralPathError, ValueError):
    """A metric cannot be computed from the given inputs (e.g. too few samples)."""

    exit_code = 4
