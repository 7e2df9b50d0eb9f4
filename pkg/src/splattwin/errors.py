"""Exception hierarchy shared by every stage.

Each class carries a short machine-readable ``code`` that the CLI prints on
failure.
"""


class SplatError(Exception):
    code = "error"


class InputError(SplatError, ValueError):
    code = "input"


class NumericalDomainError(SplatError, ArithmeticError):
    code = "domain"


class ConsistencyError(SplatError):
    code = "consistency"


class ConfigError(SplatError, ValueError):
    code = "config"


class FormatError(SplatError, ValueError):
    """A file does not follow the expected layout."""

    code = "format"


class ParseError(FormatError):
    """Malformed content at a known file position."""

    code = "parse"

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class UnsupportedFormatError(FormatError):
    code = "unsupported"


class DanglingReferenceError(ParseError):
    code = "reference"
