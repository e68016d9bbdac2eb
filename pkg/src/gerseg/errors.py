"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes inconsistent with the operation's contract."""


class ConfigError(ValueError):
    """Bad or unknown configuration key/value."""


class CheckpointError(IOError):
    """Malformed, truncated or incompatible checkpoint file."""


class StateError(RuntimeError):
    """Operation called before the state it needs exists (e.g. eval before train)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic payload."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DataError(ValueError):
    """Malformed data file or degenerate dataset configuration."""
