"""Exception hierarchy for facade-em.

The CLI maps these onto exit codes: ValidationError -> 2,
ConvergenceError -> 3, any other FacadeEMError -> 1.
"""

from pathlib import Path
from typing import Optional, Union


class FacadeEMError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(FacadeEMError):
    """Invalid input: malformed files, bad parameters, empty data."""


class ConfigError(ValidationError):
    """Invalid configuration value or config file line."""


class FormatError(ValidationError):
    """Malformed file contents, optionally located by byte offset."""

    def __init__(
        self,
        message: str,
        path: Optional[Union[str, Path]] = None,
        offset: Optional[int] = None,
    ):
        self.path = Path(path) if path is not None else None
        self.offset = offset
        location = ""
        if self.path is not None:
            location = f"{self.path}"
            if offset is not None:
                location += f" at byte {offset}"
            location += ": "
        elif offset is not None:
            location = f"at byte {offset}: "
        super().__init__(f"{location}{message}")


class EmptyModelError(ValidationError):
    """The reference segmentation produced no usable component."""


class NoEvidenceError(ValidationError):
    """The target label map has no pixel above the extraction threshold."""


class DegenerateDetectionError(ValidationError):
    """A detection box cannot be mapped to a positive scale."""


class ConvergenceError(FacadeEMError):
    """EM did not converge within the iteration budget."""
