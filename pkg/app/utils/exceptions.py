"""
Error hierarchy
Every library failure is an FDDMError carrying the CLI exit code it maps to
"""


class FDDMError(Exception):
    """Base class for all toolkit errors"""

    exit_code: int = 1
    code: str = "ERROR"


class UsageError(FDDMError):
    code = "USAGE"


class ConfigError(FDDMError, ValueError):
    code = "CONFIG"


class DimensionError(FDDMError, ValueError):
    code = "DIMENSION"


class ParameterError(FDDMError, ValueError):
    code = "PARAMETER"


class ContractError(FDDMError, ValueError):
    code = "CONTRACT"


class EmptyMaskError(FDDMError, ValueError):
    code = "EMPTY_MASK"


class PersistenceError(FDDMError):
    exit_code = 2
    code = "IO"


class CorruptionError(PersistenceError):
    code = "CORRUPT"


class CheckpointVersionError(PersistenceError):
    code = "VERSION"


class DatasetError(PersistenceError):
    code = "DATASET"


class GenerationError(FDDMError):
    exit_code = 3
    code = "GENERATION"


class TrainingError(FDDMError):
    exit_code = 3
    code = "NUMERIC"

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
