"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class ConfigError(ValidationError):
    """A run configuration or model bundle is inconsistent or incomplete."""


class DecompositionError(ArithmeticError):
    """A matrix factorisation failed even after regularisation."""


class ResourceError(RuntimeError):
    """A planned computation exceeds the configured resource budget."""

    def __init__(self, message, sizing=None):
        super().__init__(message)
        self.sizing = sizing or {}
