"""Exception types shared by the toolkit.

The CLI maps these onto process exit codes (config 2, data 3,
non-convergence 4).
"""


class ValidationError(ValueError):
    """Invalid parameters or configuration."""

    def __init__(self, message, section=None, field=None):
        self.section = section
        self.field = field
        self.reason = message
        where = ".".join(p for p in (section, field) if p)
        super().__init__(f"[{where}] {message}" if where else message)


class DataError(ValueError):
    """Input data that cannot support the requested analysis."""


class ConvergenceError(RuntimeError):
    """Iterative fit failed to converge."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
