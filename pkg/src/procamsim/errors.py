"""Exception hierarchy shared across the package.

CLI exit-code mapping: usage errors -> 1, ValidationError -> 2,
NumericalError -> 3.
"""


class ProcamsimError(Exception):
    """Base class for all package errors."""


class ValidationError(ProcamsimError):
    """Input data violates a declared invariant or schema constraint."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class SceneParseError(ValidationError):
    """Scene file could not be parsed; carries location diagnostics."""


class ResolutionMismatchError(ValidationError):
    """Two images/buffers that must share a resolution do not."""


class BehindDeviceError(ValidationError):
    """Point has non-positive depth in the device frame."""


class SingularMatrixError(ValidationError):
    """A matrix that must be invertible is singular."""


class DegenerateGeometryError(ValidationError):
    """Geometric configuration does not admit a solution (e.g. zero baseline)."""


class EmptyMeshError(ValidationError):
    """Depth grid does not contain enough valid pixels to mesh."""


class NumericalError(ProcamsimError):
    """Non-finite values or a failed numerical procedure."""


class MissingRecordError(ProcamsimError):
    """Backward pass requested without a differentiable forward record."""
