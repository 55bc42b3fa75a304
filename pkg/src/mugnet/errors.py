"""Exception hierarchy shared across the package."""


class MuGNetError(Exception):
    """Base class for all package errors."""


class DimensionError(MuGNetError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(MuGNetError, ValueError):
    """An operation was asked to work on an empty or invalid domain."""


class ContractError(MuGNetError, ValueError):
    """A caller violated a documented precondition."""


class ParameterError(MuGNetError, ValueError):
    """A numeric parameter is out of its allowed range."""


class ConfigError(MuGNetError, ValueError):
    """A configuration file or object is inconsistent."""


class ValidationError(MuGNetError, ValueError):
    """Input data failed validation (e.g. label out of range)."""


class ParseError(MuGNetError, ValueError):
    """A text file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f" line {line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class TrainingDivergedError(MuGNetError, RuntimeError):
    """Loss or parameters became non-finite during training."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (last loss {loss!r})")
