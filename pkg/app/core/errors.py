"""
Exception hierarchy for PromptReID.

The CLI maps these onto process exit codes (see app.main).
"""

from typing import Optional


class PromptReIDError(Exception):
    """Base class for all PromptReID errors."""
    pass


class ConfigurationError(PromptReIDError, ValueError):
    """Raised when configuration or input geometry is invalid."""
    pass


class RunLockError(ConfigurationError):
    """Raised when an output directory is already owned by another run."""
    pass


class PromptLookupError(PromptReIDError, LookupError):
    """Raised when an identity or clothing label has no prompt row."""
    pass


class ContractError(PromptReIDError, ValueError):
    """Raised when an input violates a documented contract (shapes, normalisation)."""
    pass


class NumericError(PromptReIDError, ArithmeticError):
    """Raised when a computation produces or receives numerically invalid values."""

    def __init__(self, message: str, layer: Optional[int] = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class FreezeContractError(PromptReIDError, RuntimeError):
    """Raised when a frozen parameter group receives gradient or changes value."""

    def __init__(self, message: str, group: Optional[str] = None):
        super().__init__(message)
        self.group = group


class NoValidQueriesError(PromptReIDError, ValueError):
    """Raised when no query keeps a relevant gallery item under a protocol."""

    def __init__(self, protocol: str):
        super().__init__(f"No valid queries under protocol '{protocol}'")
        self.protocol = protocol
