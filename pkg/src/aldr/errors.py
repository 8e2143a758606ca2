"""Exception hierarchy shared by every module of the package."""


class AldrError(Exception):
    """Base class for all package errors."""


class DimensionError(AldrError, ValueError):
    pass


class ParameterError(AldrError, ValueError):
    pass


class ValidationError(AldrError, ValueError):
    pass


class ParseError(AldrError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormatError(AldrError, ValueError):
    def __init__(self, field: str, value):
        self.field = field
        self.value = value
        super().__init__(f"unsupported {field}: {value!r}")


class InputTooShortError(AldrError, ValueError):
    pass


class DegenerateInputError(AldrError, ValueError):
    pass


class ContractError(AldrError, RuntimeError):
    pass


class NumericFault(AldrError, ArithmeticError):
    def __init__(self, message: str, component: str | None = None):
        self.component = component
        super().__init__(message)


class CheckpointError(AldrError, IOError):
    pass


class ConfigError(AldrError, ValueError):
    pass
