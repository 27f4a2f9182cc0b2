"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError (and subclasses) exit 2,
ServiceError exit 3, ProtocolError exit 4.
"""


class KGHarvestError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(KGHarvestError):
    """Invalid input data: bad schema, violated invariant, bad config."""


class ParseError(ValidationError):
    """A file failed to parse. Message names the offending field/line."""


class ServiceError(KGHarvestError):
    """An external service (paraphraser, LM endpoint) is unreachable or failed."""


class ProtocolError(KGHarvestError):
    """A remote service answered with a malformed or unexpected response."""


class TranscriptMiss(ServiceError):
    """A transcript-backed paraphraser has no recorded entry for a request."""


class StageError(KGHarvestError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
