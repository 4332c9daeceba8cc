"""Exception hierarchy for the essential-matrix averaging pipeline.

Every error carries the process exit code the command line driver reports
for it, so `scripts/averager.py` can map failures without a lookup table.
"""
from typing import Any, Optional, Tuple


class AveragingError(Exception):
    """Base class for all pipeline errors."""
    exit_code = 7


class ValidationError(AveragingError):
    """Input violates a documented invariant."""
    exit_code = 3


# geom

class AsymmetryError(ValidationError):
    """Matrix expected to be antisymmetric is not."""


class SingularInputError(ValidationError):
    """Matrix expected to be nonsingular is (numerically) singular."""


class CoincidentCentersError(ValidationError):
    """Two camera centers coincide, so their relative geometry is undefined."""


class DegenerateEssentialError(ValidationError):
    """Singular values are not of the (s, s, 0) shape."""


class InvalidEssentialError(ValidationError):
    """A measured block fails the essential-matrix invariants."""


class InconsistentPairError(AveragingError):
    """Two pose pairs imply different similarity rotations."""


class CollinearDegenerateError(ValidationError):
    """Centers are coincident or collinear where a triangle is required."""


# nview

class IncompleteMatrixError(AveragingError):
    """A check that needs every block ran on a partially observed matrix."""
    exit_code = 4


class EigenvalueMultiplicityError(AveragingError):
    """The six nonzero eigenvalues are not pairwise distinct."""


class PairingError(ValidationError):
    """Positive and negative eigenvalues do not pair up."""


class NoValidSignError(AveragingError):
    """No eigenvector sign configuration yields a block rotation."""
    exit_code = 1


class RetrySampling(AveragingError):
    """A random draw hit a degenerate case; the caller draws again."""


# cover

class ZeroTranslationError(ValidationError):
    """A relative translation has zero length."""


class DisconnectedGraphError(AveragingError):
    """The viewing graph is not connected."""


class EmptyCoverError(AveragingError):
    """Triplet filtering left nothing usable."""


# admm

class NotConvergedError(AveragingError):
    """Solver hit its iteration cap; the best iterate is attached."""
    exit_code = 5

    def __init__(self, message: str, best: Any = None, trace: Any = None):
        super().__init__(message)
        self.best = best
        self.trace = trace


# register

class ConfigurationMismatchError(AveragingError):
    """Two triplets sharing a camera pair disagree on its configuration."""

    def __init__(self, message: str, edge: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.edge = edge


class InsufficientOverlapError(AveragingError):
    """Too few (or collinear) common views to fit a similarity."""


# synthbench

class LayoutDegenerateError(AveragingError):
    """Sampled camera layout stayed (nearly) collinear after resampling."""


class StageError(AveragingError):
    """Pipeline failure annotated with the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", AveragingError.exit_code)


# storage / cli

class FormatError(ValidationError):
    """File does not follow the record grammar."""


class UsageError(AveragingError):
    """Invalid command-line arguments."""
    exit_code = 2
