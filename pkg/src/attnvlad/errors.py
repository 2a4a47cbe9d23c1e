"""Exception taxonomy shared across the pipeline.

Every byte stream, request or stage either succeeds or raises one of these;
nothing in the package raises bare exceptions for expected failure modes.
"""

from __future__ import annotations


class AttnVladError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(AttnVladError):
    """A domain object violates one of its invariants."""


class FormatError(AttnVladError):
    """On-disk bytes do not form a valid artifact (bad magic, version, dtype)."""


class TruncatedPayloadError(FormatError):
    """A file ended before its declared payload was complete."""

    def __init__(self, expected: int, actual: int, what: str = "payload"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")


class DimensionError(AttnVladError):
    """Matrix/tensor shapes are incompatible."""


class ParameterError(AttnVladError):
    """A caller-supplied argument is out of its documented domain."""


class ConsistencyError(AttnVladError):
    """Cross-artifact identifiers disagree (image ids, layer tags, truth ids)."""


class DegenerateInputError(AttnVladError):
    """Input is structurally valid but has no usable signal (zero norm, T=0)."""


class TrainingError(AttnVladError):
    """Codebook training cannot proceed (e.g. fewer distinct rows than clusters)."""


class StageError(AttnVladError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
