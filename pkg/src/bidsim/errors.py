"""Exception types shared across the package."""


class ConfigurationError(Exception):
    """Bad experiment configuration, CLI flags, or config file (CLI exit code 1)."""


class TrainingError(RuntimeError):
    """Training diverged or hit a non-finite loss (CLI exit code 2)."""


class LogSchemaError(ValueError):
    """Impression-log CSV header does not match the documented schema."""


class LogParseError(ValueError):
    """Malformed impression-log row; message names the line and column."""

    def __init__(self, line: int, column: str, reason: str):
        super().__init__(f"line {line}, column '{column}': {reason}")
        self.line = line
        self.column = column
