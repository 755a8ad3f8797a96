"""Exception types shared across Faultscope modules."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid run configuration or command-line usage."""


class DatasetFormatError(ValueError):
    """A data file violates the CSV contract."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or failed to converge."""


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, message: str = "training loss became non-finite") -> None:
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch
