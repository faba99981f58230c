"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model, policy or experiment configuration."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class WeightDegeneracyError(ValueError):
    """An inverse-propensity weight would be infinite (propensity 0 or 1)."""


class NotReadyError(RuntimeError):
    """An arm estimator has no usable (nonsingular) design yet."""


class LogFormatError(ValueError):
    """A logged-bandit CSV file violates the expected schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
