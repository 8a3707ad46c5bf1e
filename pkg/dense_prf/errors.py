"""
dense_prf/errors.py

Exception hierarchy shared by every stage. The CLI maps these onto exit codes.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Union


class DensePrfError(Exception):
    """Base class for all errors raised by dense_prf."""


class DimensionMismatchError(DensePrfError, ValueError):
    pass


class DuplicateIdError(DensePrfError, ValueError):
    pass


class CorruptIndexError(DensePrfError):
    """Bad magic number, checksum mismatch or truncated index/checkpoint file."""


class MissingEmbeddingError(DensePrfError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class DataFormatError(DensePrfError, ValueError):
    """Malformed input line. Carries the file path and 1-based line number."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None, line_no: Optional[int] = None):
        self.path = str(path) if path is not None else None
        self.line_no = line_no
        where = ""
        if self.path is not None and line_no is not None:
            where = f"{self.path}:{line_no}: "
        elif line_no is not None:
            where = f"line {line_no}: "
        super().__init__(f"{where}{message}")


class ConfigError(DensePrfError):
    """Config validation failure; lists every violation found, not just the first."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("invalid config:\n  - " + "\n  - ".join(self.violations))


class TrainingDivergedError(DensePrfError, RuntimeError):
    pass


class StageError(DensePrfError):
    """A pipeline stage could not start because its inputs are missing."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
