class DriverLensError(Exception):
    """Base class for all package errors."""


class ConfigError(DriverLensError):
    """Invalid configuration (exit code 2 at the CLI)."""


class ValidationError(DriverLensError):
    """A record or input violates a documented invariant (exit code 3)."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FormatError(ValidationError):
    """Malformed file content; carries the offending line number."""

    def __init__(self, message, line=None, field=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, field=field)
        self.line = line


class SimulationError(DriverLensError):
    """The integrator produced a non-finite state."""


class ReportIncomplete(DriverLensError):
    """A report is missing required rows (exit code 4)."""
