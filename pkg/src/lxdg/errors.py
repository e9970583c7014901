"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ParameterError(ValueError):
    """A configuration value is outside its allowed range."""


class DataError(ValueError):
    """Input data violates a documented precondition."""


class ContractError(RuntimeError):
    """An API contract was violated (wrong mode, stale tape, misuse)."""


class IdxParseError(ValueError):
    """An IDX file failed to parse; message names the file and offset."""


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; message names the step and offending term."""
