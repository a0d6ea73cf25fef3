"""Exception hierarchy shared across the pipeline stages."""


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PipelineError):
    """Malformed data: bad schema fields, bad segment boundaries, bad JSONL."""


class ConfigError(PipelineError):
    """Invalid configuration value (out-of-range fraction, bad endpoint file, ...)."""


class BackendError(PipelineError):
    """Transport-level failure. ``retryable`` tells the client whether backing off
    and retrying can help (connection resets, 429/5xx) or not (malformed request)."""

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class GenerationError(PipelineError):
    """The model produced an unusable completion (e.g. empty output)."""


class JudgeError(PipelineError):
    """The judge reply could not be turned into a verdict."""


class CapabilityError(PipelineError):
    """The backend does not support the requested operation (scoring, logprobs)."""


class ContractError(PipelineError):
    """An internal invariant was violated (mismatched lengths, missing fields)."""


class InferenceError(PipelineError):
    """A streaming inference pass failed partway; carries the partial lineage."""

    def __init__(self, message: str, lineage: tuple[str, ...] = ()):
        super().__init__(message)
        self.lineage = lineage


class UserSkip(PipelineError):
    """A user was dropped by a pipeline filter. Expected control flow, not a failure."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason
