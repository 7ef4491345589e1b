class ContractError(RuntimeError):
    """A backward pass was handed a tape it cannot use (missing or already consumed)."""


class DivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class GenerationError(RuntimeError):
    """A synthetic scene could not satisfy its placement constraints."""


class DumpParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")
