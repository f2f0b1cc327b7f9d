"""
Errors raised by maucl
======================

Library code raises these; the CLI turns them into a logged message and a
nonzero exit code.
"""

from typing import Optional


class MauclError(Exception):
    """Base class for every error the package raises on purpose"""


class ConfigError(MauclError):
    """Invalid or inconsistent configuration"""


class DatasetFormatError(MauclError):
    """A dataset file could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        self._raw = message
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

    def __reduce__(self):
        return (type(self), (self._raw, self.line))


class StructuralError(MauclError):
    """Shapes or dimensions disagree with the declared structure"""


class SplitError(MauclError):
    """Task splitting could not satisfy the task invariants"""


class DegenerateRiskError(MauclError):
    """Every class of a task lacks positives or negatives in the view"""


class DegenerateEvaluationError(MauclError):
    """No class of an evaluation set has both positives and negatives"""


class NonFiniteGradientError(MauclError):
    """A gradient contains NaN or infinite entries"""


class MemoryCapacityError(MauclError):
    """The rehearsal buffer cannot give every task a nonzero quota"""


class EmptyMemoryError(MauclError):
    """Sampling was requested from an empty rehearsal buffer"""


class ReportError(MauclError):
    """A run directory is missing files or holds corrupt ones"""


class StageError(MauclError):
    """Wraps a failure with the experiment stage it happened in"""

    def __init__(self, stage: str, cause: BaseException, task: Optional[int] = None):
        self.stage = stage
        self.task = task
        self.cause = cause
        where = stage if task is None else f"{stage} (task {task})"
        super().__init__(f"{where}: {cause}")

    # worker processes pickle exceptions back to the parent
    def __reduce__(self):
        return (type(self), (self.stage, self.cause, self.task))
