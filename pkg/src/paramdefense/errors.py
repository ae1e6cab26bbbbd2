"""Exception hierarchy shared by every module."""


class ParamDefenseError(Exception):
    """Base class for all library errors."""


class RejectedInputError(ParamDefenseError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateGradientError(ParamDefenseError, ArithmeticError):
    """A maximizer is undefined because the (masked) gradient vanishes."""


class UnsupportedNormError(ParamDefenseError, ValueError):
    """The requested norm order has no closed-form routine."""


class NumericalError(ParamDefenseError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DivergedTrainingError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, value: float):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"training diverged at epoch {epoch}, step {step}: loss={value!r}")


class OracleResolutionError(ParamDefenseError):
    """A brute-force oracle grid is too coarse to bound the closed form."""


class DataFormatError(ParamDefenseError, ValueError):
    """A dataset file is malformed."""

    def __init__(self, path, offset, message: str):
        self.path = str(path)
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{self.path}: {message}{where}")


class CheckpointError(ParamDefenseError):
    """A checkpoint cannot be read back."""


class ConfigError(ParamDefenseError, ValueError):
    """An experiment configuration file is invalid."""
