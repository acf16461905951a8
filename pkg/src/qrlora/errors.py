"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument violates a documented precondition."""


class ConvergenceError(RuntimeError):
    """An iterative routine exhausted its iteration budget."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the offending step index."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")


class MatrixFileError(ValueError):
    """Malformed matrix file; `offset` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class ManifestError(ValueError):
    """Checkpoint manifest is missing, inconsistent, or references bad files."""


class ConfigError(ValueError):
    """Training configuration violates the accepted schema."""
