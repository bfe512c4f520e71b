"""Exception types shared across the lab."""

from __future__ import annotations


class UlabError(Exception):
    """Base class for all lab-specific errors."""


class FormatError(UlabError):
    """A file (IDX, CSV, checkpoint) violates its declared format."""


class MembershipError(UlabError):
    """An unlearn request named an id that is not in the training set.

    This is the hash-check safeguard: deletion requests for content that
    was never trained on are rejected instead of silently applied.
    """

    def __init__(self, offending_id: int, message: str | None = None):
        self.offending_id = offending_id
        super().__init__(
            message or f"id {offending_id:#018x} is not a member of the dataset"
        )


class DivergenceError(UlabError):
    """An iterative procedure (training or a solver) diverged."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(message)


class NumericalError(UlabError):
    """A parameter update produced non-finite values."""


class CovarianceError(UlabError):
    """A covariance matrix is unusable (singular even after shrinkage)."""


class UndefinedSimilarityError(UlabError):
    """Cosine similarity was requested for a zero-norm embedding."""


class NoVotersError(UlabError):
    """Every shard of an ensemble is empty; no prediction is possible."""


class InvalidReplacementError(UlabError):
    """A healing replacement collides with the training set or a deleted id."""
