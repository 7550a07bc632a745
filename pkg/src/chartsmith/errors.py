"""Exception taxonomy shared across the package."""


class ChartsmithError(Exception):
    """Base class for all package errors."""


class GatewayError(ChartsmithError):
    """Base class for model-backend failures."""


class TransportError(GatewayError):
    """Network-level failure that persisted through the retry budget."""


class ProtocolError(GatewayError):
    """The backend answered, but the body was not a usable completion."""


class AuthError(GatewayError):
    """Credential rejected. Never retried."""


class RefusalError(GatewayError):
    """The model returned an empty assistant message."""


class ScriptExhausted(GatewayError):
    """A scripted backend was called more times than it has responses."""


class CodeExtractionError(ChartsmithError):
    """No code block could be recovered from a model reply."""


class OcrBackendError(ChartsmithError):
    """The text extractor failed on an image."""


class DimensionMismatch(ChartsmithError):
    """Two matrices passed to a pairwise metric have incompatible shapes."""


class UnknownFacet(ChartsmithError):
    """An evaluation facet name outside {text, type, color, layout}."""


class GoldRenderError(ChartsmithError):
    """The gold program of a task failed to render; the task is excluded."""


class ConfigError(ChartsmithError):
    """Invalid or unknown configuration content."""


class TaskLoadError(ChartsmithError):
    """A task directory is missing required files or holds bad data."""


class AgentChainError(ChartsmithError):
    """Unrecoverable gateway failure mid-run; carries the partial trace."""

    def __init__(self, message: str, partial_trace=None):
        super().__init__(message)
        self.partial_trace = partial_trace
