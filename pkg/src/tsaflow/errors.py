"""Shared exception types.

Every failure mode callers are expected to branch on gets its own class;
generic ValueError/RuntimeError are reserved for programming mistakes.
"""


class TsaflowError(Exception):
    pass


class DimensionError(TsaflowError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(TsaflowError, ValueError):
    """An operation parameter is outside its allowed range."""


class ShapeError(TsaflowError, ValueError):
    """A size constraint (divisibility, minimum extent) is violated."""


class GraphError(TsaflowError, RuntimeError):
    """Backward-pass contract violated (e.g. non-scalar loss)."""


class DegenerateMaskError(TsaflowError, ValueError):
    """A masked reduction selected zero entries."""


class UndefinedMetricError(TsaflowError, ValueError):
    """A metric's query set is empty for this image."""


class ConfigError(TsaflowError, ValueError):
    """A configuration value or combination is invalid."""


class DatasetError(TsaflowError, IOError):
    pass


class DatasetFormatError(DatasetError):
    """Magic bytes or header are not parseable."""


class DatasetTruncatedError(DatasetError):
    """File ends before the payload the header promises."""


class DatasetShapeError(DatasetError):
    """Header-declared shapes disagree with the declared payload size."""


class DatasetChecksumError(DatasetError):
    """Payload bytes fail the trailing CRC32."""


class CheckpointLoadError(TsaflowError, IOError):
    """Checkpoint contents do not fit the model being restored."""


class TrainingDivergedError(TsaflowError, RuntimeError):
    """Loss became non-finite; carries the path of the last good checkpoint."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
