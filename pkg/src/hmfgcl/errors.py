"""Exception hierarchy.

Input and configuration problems derive from ``InputError`` (CLI exit code 2);
numerical failures derive from ``NumericalError`` (CLI exit code 3).
"""


class HmfgclError(Exception):
    pass


class InputError(HmfgclError, ValueError):
    pass


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class SchemaError(InputError):
    pass


class EmptyDatasetError(InputError):
    pass


class RangeError(InputError):
    pass


class ShapeError(InputError):
    pass


class ConfigError(InputError):
    pass


class SamplingError(HmfgclError, RuntimeError):
    pass


class NumericalError(HmfgclError, ArithmeticError):
    pass
