"""Exception hierarchy shared by every module."""

from typing import Dict, Optional


class SlamError(Exception):
    """Base class for all errors raised by the package."""


class InvalidArgumentError(SlamError, ValueError):
    """An input to a pure function violates its preconditions."""


class NonFiniteParameterError(SlamError):
    """A primitive carries NaN or infinite parameters."""

    def __init__(self, index: int, field: str):
        self.index = index
        self.field = field
        super().__init__(f"Primitive {index} has non-finite {field}")


class InitializationError(SlamError):
    """The map could not be initialized from the first frame."""


class DivergenceError(SlamError):
    """An optimization loop produced a non-finite loss."""

    def __init__(self, stage: str, iteration: int, terms: Optional[Dict[str, float]] = None):
        self.stage = stage
        self.iteration = iteration
        self.terms = terms or {}
        detail = ", ".join(f"{name}={value:.6g}" for name, value in self.terms.items())
        super().__init__(f"{stage} diverged at iteration {iteration}: {detail}")


class DatasetError(SlamError):
    """A sequence could not be loaded or associated."""


class ConfigError(SlamError):
    """A configuration file or override is malformed."""


class CheckpointError(SlamError):
    """A checkpoint file is missing, truncated or of an unknown format."""


class EvaluationError(SlamError):
    """Metric inputs are insufficient or inconsistent."""
