class ConfigError(ValueError):
    """Invalid configuration or input layout.  CLI maps this to exit code 2."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NumericalError(RuntimeError):
    """Non-finite loss or parameters.  CLI maps this to exit code 3."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class CheckpointFormatError(ValueError):
    """Checkpoint file has the wrong magic bytes or format version."""

    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"checkpoint format mismatch: expected {expected!r}, found {actual!r}")
