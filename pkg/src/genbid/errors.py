"""Exception taxonomy shared across the package."""


class GenbidError(Exception):
    """Base class for all package errors."""

    code = "error"


class ConfigError(GenbidError):
    """Invalid or inconsistent configuration."""

    code = "config"


class InvalidInputError(GenbidError):
    """Caller passed values outside an operation's contract."""

    code = "invalid-input"


class IngestError(GenbidError):
    """External trajectory file failed schema or range validation."""

    code = "ingest"


class CheckpointError(GenbidError):
    """Checkpoint missing, malformed, or inconsistent with the run config."""

    code = "checkpoint"


class NotTrainedError(GenbidError):
    """Model asked to act before any training was recorded."""

    code = "not-trained"


class StageGateError(GenbidError):
    """Pipeline stage started without its prerequisite artifacts."""

    code = "stage-gate"


class DivergenceError(GenbidError):
    """Training produced non-finite losses."""

    code = "divergence"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
