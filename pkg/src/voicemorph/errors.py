"""Exception hierarchy shared across the package."""


class VoiceMorphError(Exception):
    """Base class for all package errors."""


class DegenerateEmbedding(VoiceMorphError):
    pass


class ShapeError(VoiceMorphError):
    pass


class KindError(VoiceMorphError):
    pass


class EmptyProfile(VoiceMorphError):
    pass


class AntipodalEmbeddings(VoiceMorphError):
    pass


class FormatError(VoiceMorphError):
    pass


class TooShortError(VoiceMorphError):
    pass


class InsufficientData(VoiceMorphError):
    pass


class EmptyReference(VoiceMorphError):
    pass


class NumericalError(VoiceMorphError):
    pass


class BackendError(VoiceMorphError):
    """A backend failed; ``diagnostics`` carries captured stderr or context."""

    def __init__(self, message: str, diagnostics: str = ""):
        super().__init__(message)
        self.diagnostics = diagnostics


class ContractViolation(BackendError):
    pass


class StageError(VoiceMorphError):
    """Wraps an error raised inside one synthesis stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
