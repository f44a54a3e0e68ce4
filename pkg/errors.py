"""
Exception hierarchy for the CLASTER toolkit.

Every error carries the process exit code the CLI should return:
  2  usage / configuration problems
  3  bad input data (also a ValueError, so callers can catch it the usual way)
  4  numeric failures during training or evaluation
"""


class ClasterError(Exception):
    exit_code = 1

    def __init__(self, message, phase=None):
        super().__init__(message)
        self.phase = phase


# ── Usage ──────────────────────────────────────────────────────────

class UsageError(ClasterError):
    exit_code = 2


class ConfigError(UsageError):
    """Unknown or invalid configuration key. `key` names the culprit."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


# ── Data ───────────────────────────────────────────────────────────

class DataError(ClasterError, ValueError):
    exit_code = 3


class EmptyDataset(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class MalformedRecord(DataError):

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonFiniteValue(DataError):
    pass


class DuplicateClass(DataError):
    pass


class ZeroEmbedding(DataError):
    pass


class OverlappingSplit(DataError):
    pass


class UnknownClass(DataError):
    pass


class EmptySide(DataError):
    pass


class NoSeenInstances(DataError):
    pass


class ClassSetMismatch(DataError):
    pass


class InvalidSpec(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class TooFewPoints(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyNeighborSet(DataError):
    pass


class EmptyUnseenSet(DataError):
    pass


class SplitMismatch(DataError):
    pass


class TooFewSamples(DataError):
    pass


class OutOfRange(DataError):
    pass


# ── Numeric ────────────────────────────────────────────────────────

class NumericError(ClasterError, ArithmeticError):
    exit_code = 4


class InvalidProbability(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class ZeroVariance(NumericError):
    pass


class ZeroVector(NumericError):
    pass


# ── Pipeline ───────────────────────────────────────────────────────

class PhaseOrderError(ClasterError, RuntimeError):
    pass
