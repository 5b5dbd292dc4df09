"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
ParseError/DataError/StateError -> 3, NumericError -> 4. Anything else is a
bug and is allowed to traceback.
"""


class FuncregError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ShapeError(FuncregError):
    """Operands have incompatible shapes."""


class NumericError(FuncregError):
    """A numeric contract failed (NaN/Inf input, non-finite loss or grad)."""


class DomainError(FuncregError):
    """A value is outside its mathematical domain (e.g. not a distribution)."""


class ContractError(FuncregError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class StateError(FuncregError):
    """Required runtime state is missing (no snapshot, uninitialized EMA, empty dataset)."""


class ConfigError(FuncregError):
    """Invalid or inconsistent configuration."""


class DataError(FuncregError):
    """A dataset violates its contract (bad labels, empty split)."""


class ParseError(FuncregError):
    """A file could not be parsed; message carries a line or byte offset."""
