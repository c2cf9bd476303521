"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class MixasrError(Exception):
    """Base class for toolkit errors."""


class ConfigError(MixasrError):
    """Invalid configuration or argument combination (CLI exit code 2)."""


class DataError(MixasrError):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class InfeasibleTargetError(DataError):
    """A label sequence that cannot be emitted in the available frames."""


class NumericError(MixasrError):
    """Non-finite loss or other numeric failure (CLI exit code 4)."""
