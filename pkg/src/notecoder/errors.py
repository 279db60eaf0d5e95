"""Exception hierarchy shared by every notecoder module."""


class NotecoderError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NotecoderError):
    """Tensor or vector dimensions do not match the declared contract."""


class NumericError(NotecoderError):
    """A non-finite value appeared where finite math was required."""


class CodeFormatError(NotecoderError):
    """A diagnosis code string does not parse as ICD-9."""


class UnmappedCodeError(NotecoderError):
    """A well-formed code falls outside every configured chapter range."""


class EmptyNoteError(NotecoderError):
    """A note contains no usable text after cleaning."""


class MissingEmbeddingError(NotecoderError):
    """The file-backed provider has no entry for the requested chunk."""


class ProviderUnavailableError(NotecoderError):
    """The remote embedding provider stayed unreachable after retries."""


class ProviderRequestError(NotecoderError):
    """The remote embedding provider rejected the request (4xx)."""


class CheckpointError(NotecoderError):
    """A checkpoint or bundle failed to load (version, checksum, truncation)."""


class CompatibilityError(NotecoderError):
    """Model artifacts disagree on their label-space fingerprint."""


class UndefinedMetricError(NotecoderError):
    """A metric was requested on counts where it has no defined value."""


class ConfigError(NotecoderError):
    """A configuration value violates its invariants."""
