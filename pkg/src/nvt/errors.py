"""Exception types shared across the package."""


class NVTError(Exception):
    """Base class for all errors raised by nvt."""


class ContractError(NVTError):
    """A caller violated an operation's precondition."""


class DimensionError(NVTError, ValueError):
    """Operand shapes are incompatible."""


class NumericInputError(NVTError, ValueError):
    """Input contains NaN or infinity where finite values are required."""


class ConfigError(NVTError, ValueError):
    """Invalid configuration. ``field`` names the offending key path when known."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class FormatError(NVTError):
    """Malformed binary input. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})" if offset is not None else message)


class DatasetError(NVTError):
    pass


class EstimationError(NVTError):
    """A statistical estimate could not be formed (e.g. rank-deficient covariance)."""

    def __init__(self, message: str, rank: int | None = None):
        self.rank = rank
        super().__init__(message)


class TrainingAborted(NVTError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, epoch: int, batch: int, loss: float, lr: float):
        self.epoch, self.batch, self.loss, self.lr = epoch, batch, loss, lr
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch} (lr={lr:.3e})")
