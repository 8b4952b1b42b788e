"""Exception types shared across the package."""


class PromptCtlError(Exception):
    """Base class for package-specific failures."""


class SchemaError(PromptCtlError):
    """Output violates the structural protocol grammar."""


class SemanticError(PromptCtlError):
    """Structurally valid output with task-invalid content (bad index, point, ...)."""


class FeasibilityError(PromptCtlError):
    """A prompt state cannot be made to fit the available token budget."""


class InsufficientBudget(PromptCtlError):
    """A decision costs more than the remaining evaluation budget."""


class ExhaustedBudget(PromptCtlError):
    """No fidelity model is affordable any more; the episode is over."""


class BufferBoundsError(PromptCtlError):
    """Replay buffer size is outside its configured [d_lo, d_hi] bounds."""


class EnumerationCapError(PromptCtlError):
    """An exhaustive check would exceed its configured enumeration cap."""


class SupportError(PromptCtlError):
    """A target distribution puts mass where the model assigns zero probability."""

    def __init__(self, message: str, token=None):
        super().__init__(message)
        self.token = token


class DivergenceError(PromptCtlError):
    """Training loss increased repeatedly; the learning rate is too large."""


class ConfigError(PromptCtlError):
    """A config file entry is unknown, malformed, or out of range."""
