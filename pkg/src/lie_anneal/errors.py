"""Exception types shared across the package."""


class LieAnnealError(Exception):
    """Base class for package errors."""


class ValidationError(LieAnnealError):
    """Bad parameters or malformed configuration."""


class ModelMismatchError(ValidationError):
    """Group elements passed to an operation of a different model."""


class UnsupportedModelError(ValidationError):
    """Operation not defined for this group model (e.g. Haar on a non-compact group)."""


class EvaluationError(LieAnnealError):
    """A scalar field or kernel produced a non-finite value."""


class NumericError(LieAnnealError):
    """A numerical routine failed to converge; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
