"""Exception types and the CLI exit codes they map to."""

from typing import Dict, List, Optional

EXIT_OK = 0
EXIT_CERTIFICATION = 1
EXIT_PARSE = 2
EXIT_ORDERING = 3
EXIT_RESOURCES = 4


class SimrelError(Exception):
    """Base class for all simrel errors."""

    exit_code = EXIT_CERTIFICATION


class DimensionError(SimrelError, ValueError):
    """Operand with an incompatible shape."""

    def __init__(self, operand: str, expected, actual):
        self.operand = operand
        self.expected = expected
        self.actual = actual
        super().__init__(f"dimension mismatch in '{operand}': expected {expected}, got {actual}")


class ProviderError(SimrelError, RuntimeError):
    """Input or noise provider failed during simulation."""

    def __init__(self, step: int, cause: Exception):
        self.step = step
        self.cause = cause
        super().__init__(f"provider failed at step {step}: {cause}")


class CertificationError(SimrelError):
    """One or more certification conditions failed."""

    def __init__(self, failures: Dict[str, float], message: Optional[str] = None):
        self.failures = dict(failures)
        names = ", ".join(f"{k} (residual {v:.3g})" for k, v in self.failures.items())
        super().__init__(message or f"certification failed: {names}")


class ModelFileError(SimrelError):
    """Malformed or unsupported model file."""

    exit_code = EXIT_PARSE

    def __init__(self, message: str, line: Optional[int] = None,
                 column: Optional[int] = None, path: Optional[List[str]] = None):
        self.line = line
        self.column = column
        self.path = path or []
        where = ""
        if line is not None:
            where = f" (line {line}, column {column})"
        elif self.path:
            where = f" (at {'.'.join(self.path)})"
        super().__init__(f"{message}{where}")


class MissingArtifactError(SimrelError):
    """A prerequisite stage has not produced its artifact yet."""

    exit_code = EXIT_ORDERING


class ResourceCapError(SimrelError):
    """Refusal because an estimated resource use exceeds the configured cap."""

    exit_code = EXIT_RESOURCES

    def __init__(self, what: str, estimate_mb: float, cap_mb: float):
        self.estimate_mb = estimate_mb
        self.cap_mb = cap_mb
        super().__init__(f"{what} needs ~{estimate_mb:.1f} MB, cap is {cap_mb:.1f} MB")
