"""Exception hierarchy.

Every error carries a stable ``code`` used by the CLI as its exit status.
"""


class UnidiffError(Exception):
    code = 1


class InvalidLayoutError(UnidiffError, ValueError):
    code = 10


class OutOfRangeError(UnidiffError, IndexError):
    code = 11


class ScheduleError(UnidiffError, ValueError):
    code = 12


class ZeroEvidenceError(UnidiffError, ValueError):
    """Posterior requested for an (x_t, x_0) pair that q(x_t | x_0) cannot produce."""

    code = 13


class InvalidPredictionError(UnidiffError, ValueError):
    code = 14


class OracleBudgetError(UnidiffError, ValueError):
    code = 15


class NumericError(UnidiffError, FloatingPointError):
    code = 16


class StaleGraphError(UnidiffError, RuntimeError):
    code = 17


class SamplerIncompleteError(UnidiffError, RuntimeError):
    code = 18


class RenderError(UnidiffError, ValueError):
    code = 19


class CheckpointError(UnidiffError, ValueError):
    code = 20


class TruncatedFileError(CheckpointError):
    code = 21


class VersionMismatchError(CheckpointError):
    code = 22


class HashMismatchError(CheckpointError):
    code = 23


class ConfigError(UnidiffError, ValueError):
    code = 30


class DatasetError(UnidiffError, ValueError):
    code = 31
