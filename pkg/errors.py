"""Exception hierarchy shared by the lab modules and mapped to exit codes by main.py."""

from typing import Optional


class LabError(Exception):
    """Base class for every error raised on purpose by the lab."""


class ShapeError(LabError, ValueError):
    """Operands have incompatible shapes."""


class RangeError(LabError, ValueError):
    """A numeric argument lies outside its legal range."""


class ParseError(LabError, ValueError):
    """A data file line could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None, path: Optional[str] = None):
        self.line_number = line_number
        self.path = path
        location = ""
        if path:
            location += f"{path}:"
        if line_number is not None:
            location += f"{line_number}:"
        super().__init__(f"{location} {message}" if location else message)


class ConfigError(LabError, ValueError):
    """Invalid configuration; `field` holds the dotted path of the offending key."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class FormatError(LabError, ValueError):
    """A checkpoint or archive file does not follow its declared format."""


class TrainingError(LabError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}" if epoch is not None else message)


class TaskError(LabError, ValueError):
    """Operation called on a model built for the other task."""


class AlignmentError(LabError, ValueError):
    """Injected attention does not line up with the input tokens."""


class EvaluationError(LabError, RuntimeError):
    """An evaluation protocol cannot produce a meaningful number."""


class MissingArtifactError(LabError, FileNotFoundError):
    """A checkpoint or archive required by a command does not exist."""
