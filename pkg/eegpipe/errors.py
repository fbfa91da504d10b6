"""
Exception hierarchy
Every failure raised by the library is an EegPipeError; the CLI maps each
subclass to a process exit code.
"""


class EegPipeError(Exception):
    """Base class for all library errors"""

    exit_code = 1


class ConfigError(EegPipeError):
    """Invalid, missing or unknown configuration"""

    exit_code = 2


class DataError(EegPipeError):
    """Input data violates a precondition (files, shapes, labels, sizes)"""

    exit_code = 3


class NumericError(EegPipeError):
    """A numerical procedure cannot produce a valid result"""

    exit_code = 4
