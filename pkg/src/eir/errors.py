"""Exception types raised across the package.

Each CLI-facing error carries an ``exit_code`` so the command line front end
can map failures to process status without inspecting messages.
"""


class EIRError(Exception):
    exit_code = 1


class ConfigError(EIRError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """A numeric argument is outside its legal range."""


class DimensionError(EIRError, ValueError):
    exit_code = 2


class DataError(EIRError):
    exit_code = 3


class FormatError(DataError, ValueError):
    """A file does not follow its binary layout."""


class CorruptionError(FormatError):
    pass


class NumericError(EIRError, ArithmeticError):
    exit_code = 4


class DomainError(NumericError, ValueError):
    pass


class DegenerateNormError(NumericError):
    pass


class VersionError(EIRError):
    exit_code = 2
