"""Exception hierarchy. The CLI maps these classes onto exit codes."""


class DpnasError(Exception):
    """Base class for all package errors."""


class ValidationError(DpnasError):
    """A value or structure violates a documented invariant."""


class ConfigError(DpnasError):
    """Run configuration failed to parse or validate."""


class PoolVersionError(DpnasError):
    """Serialized artifact was produced against a different operation pool."""


class UnsupportedOrderError(DpnasError):
    """RDP order outside the supported integer grid."""


class CalibrationError(DpnasError):
    """No noise multiplier within bounds satisfies the target budget."""


class BudgetExhaustedError(DpnasError):
    """Privacy budget does not admit even a single training step."""


class TrainingDivergedError(DpnasError):
    """Non-finite loss or weights encountered during training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ControllerDivergedError(DpnasError):
    """Non-finite gradient in a controller update."""


class IngestionError(DpnasError):
    """Dataset file failed to parse; carries file and byte offset."""

    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class CheckpointIntegrityError(DpnasError):
    """Checkpoint file is corrupt or from an incompatible version."""


class NotFoundError(DpnasError):
    """A referenced stored artifact does not exist."""
