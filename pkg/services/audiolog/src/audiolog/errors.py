"""Contains the exception hierarchy shared by all audiolog modules."""


class AudioLogError(Exception):
    """Base class of all errors raised by the package."""


class ConfigError(AudioLogError):
    """Raised when the run configuration is invalid or references missing resources."""


class UnreadableFile(AudioLogError):
    """Raised when an audio file cannot be opened or decoded."""


class UnsupportedFormat(AudioLogError):
    """Raised when an audio file is not WAV or FLAC."""


class EmptyClip(AudioLogError):
    """Raised when a feature is requested for a clip without samples."""


class ShapeMismatch(AudioLogError):
    """Raised when tensor or grid shapes violate an operation's preconditions."""


class DivergedTraining(AudioLogError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, epoch: int, step: int, diagnostics: dict[str, float]):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.diagnostics = diagnostics


class EmptyDataset(AudioLogError):
    """Raised when an operation needs at least one example."""


class CoverageGap(AudioLogError):
    """Raised when some audio second is not covered by any segment."""


class VocabularyMismatch(AudioLogError):
    """Raised when labels or class counts disagree with a vocabulary."""


class LengthMismatch(AudioLogError):
    """Raised when paired sequences differ in length."""


class EmptyInput(AudioLogError):
    """Raised when a metric is computed on no items."""


class EmptyReference(AudioLogError):
    """Raised when the reference holds no active events, leaving ER undefined."""


class MalformedRow(AudioLogError):
    """Raised when an annotation row cannot be validated."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f'line {line_number}: {message}')
        self.line_number = line_number


class MissingAudio(AudioLogError):
    """Raised when an annotation references an audio file that does not exist."""


class UnknownLabel(AudioLogError):
    """Raised when a label is not part of its vocabulary."""


class MalformedTable(AudioLogError):
    """Raised when a serialized event table cannot be parsed."""


class CheckpointError(AudioLogError):
    """Raised when a checkpoint directory is missing, incomplete or of a wrong schema."""


class ProviderError(AudioLogError):
    """Base class of failures of the LLM provider."""


class ProviderTimeout(ProviderError):
    """Raised when the provider keeps timing out after all retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f'{message} (after {attempts} attempts)')
        self.attempts = attempts


class ProviderRejected(ProviderError):
    """Raised when the provider refuses the request, e.g. due to auth or quota."""


class MalformedResponse(ProviderError):
    """Raised when the provider response does not have the expected shape."""
