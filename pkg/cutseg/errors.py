"""Exceptions raised across the segmentation pipeline.

All errors derive from `CutSegError` so callers (the command line in
particular) can separate pipeline failures from programming errors. Missing
files are reported with the builtin `FileNotFoundError`.
"""


class CutSegError(Exception):
    """Base class for every error raised by this package."""


class InvalidDataError(CutSegError, ValueError):
    """Data violates a value-type invariant (non-finite, out of range, bad
    shape)."""


class InvalidArgumentError(CutSegError, ValueError):
    """Operands are empty or do not agree with each other."""


class EmptyResultError(CutSegError):
    """A filtering step left nothing to return."""


class PhantomGenerationError(CutSegError):
    """A phantom could not be drawn with the requested geometry."""


class ManifestError(CutSegError):
    """A subject manifest is malformed or inconsistent."""


class NumericalFailure(CutSegError, FloatingPointError):
    """A non-finite value appeared in an activation, gradient or loss.

    Parameters
    ----------
    message : str
      human-readable description
    where : str
      name of the layer, parameter or loss that went non-finite
    position : object, optional
      training position (cycle position, batch index) when known
    """

    def __init__(self, message, where=None, position=None):
        super().__init__(message)
        self.where = where
        self.position = position

    def __str__(self):
        msg = super().__str__()
        if self.where is not None:
            msg = f'{msg} [at {self.where}]'
        if self.position is not None:
            msg = f'{msg} [position {self.position}]'
        return msg


class NoThresholdError(CutSegError):
    """No histogram peak was found and no threshold override was given."""


class MissingROIError(CutSegError):
    """The threshold rule requires a region of interest that was not
    supplied."""


class ConfigError(CutSegError):
    """Configuration failed validation; `violations` lists every problem."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__('invalid configuration:\n  ' +
                         '\n  '.join(self.violations))
