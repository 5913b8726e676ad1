"""Exception hierarchy shared by all pipeline stages."""


class EmoragError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EmoragError, ValueError):
    pass


class NumericError(EmoragError, FloatingPointError):
    pass


class UsageError(EmoragError, RuntimeError):
    pass


class PreconditionError(EmoragError, ValueError):
    pass


class ValidationError(EmoragError, ValueError):
    pass


class IngestionError(EmoragError, OSError):
    pass


class FormatError(EmoragError, ValueError):
    pass


class StaleCacheError(EmoragError):
    """An artifact was built from inputs that no longer match; rebuild upstream."""


class ProvenanceError(EmoragError, LookupError):
    pass


class CorruptionError(EmoragError):
    pass


class EndpointError(EmoragError):
    """The LLM endpoint could not be reached after all retries."""


class ProtocolError(EmoragError):
    """The LLM endpoint answered, but not with a usable completion."""


class TrainingError(EmoragError, RuntimeError):
    pass
