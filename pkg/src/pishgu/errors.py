"""Exception hierarchy shared by every module.

The CLI maps these onto exit statuses: ``ConfigError`` -> 3, ``ContractError``
(and subclasses) -> 4. Missing input files surface as ``FileNotFoundError``.
"""


class PishguError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PishguError):
    """A configuration value is invalid or inconsistent."""


class ContractError(PishguError):
    """A function was called in violation of its preconditions."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class EmptyFrameError(ContractError):
    """A frame graph has no subjects."""


class NonFiniteGradientError(ContractError):
    """A gradient contains NaN or Inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class FormatError(PishguError):
    """An input file does not follow its declared layout."""


class ParseError(FormatError):
    """A field could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class OracleFailure(PishguError):
    """The finite-difference oracle produced a non-finite value."""
