"""Exception hierarchy shared across the package.

CLI maps HybridRankError (and subclasses) to exit code 2; argparse usage
errors exit 1.
"""


class HybridRankError(Exception):
    """Base class for all data / validation failures."""


class FormatError(HybridRankError):
    """A binary or JSON artifact does not follow its declared format."""


class ValidationError(HybridRankError):
    """Well-formed input that violates a semantic invariant."""


class TrainingDivergedError(HybridRankError):
    """Non-finite loss encountered during optimization."""
