"""
Error types for the MVP lesion detection toolkit

Library modules raise these; only main.py turns them into exit codes.
"""


class MvpError(Exception):
    """Base class for every error raised by this project"""
    exit_code = 1


class UsageError(MvpError):
    """Bad command-line usage (unknown subcommand, flag or value)"""
    exit_code = 1


# =============================================================================
# DATA ERRORS (exit code 2)
# =============================================================================

class DataError(MvpError, ValueError):
    """Input data or configuration is invalid"""
    exit_code = 2


class VolumeNotFoundError(DataError):
    pass


class MalformedHeaderError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class InvalidSpacingError(DataError):
    pass


class InvalidWindowError(DataError):
    pass


class SlabError(DataError):
    pass


class ClusteringError(DataError):
    pass


class ShapeError(DataError):
    pass


class LabelError(DataError):
    pass


class AnchorError(DataError):
    pass


class EvaluationError(DataError):
    pass


class PlacementError(DataError):
    """Lesion placement gave up after the bounded number of retries"""
    pass


class ConfigError(DataError):
    pass


class CheckpointError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class TapeError(DataError):
    """Misuse of a gradient tape (e.g. a second backward without re-forward)"""
    pass


# =============================================================================
# NUMERIC ERRORS (exit code 3)
# =============================================================================

class NumericError(MvpError, ArithmeticError):
    exit_code = 3


class NonFiniteError(NumericError):
    """NaN or Inf found while creating a tensor in 64-bit test mode"""
    pass


class DivergenceError(NumericError):
    """Training loss became NaN/Inf"""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch}: loss = {loss}")
