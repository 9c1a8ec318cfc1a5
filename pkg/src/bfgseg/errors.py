"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class BFGError(Exception):
    exit_code = 1


class ConfigError(BFGError, ValueError):
    exit_code = 2


class ContractError(BFGError, ValueError):
    """A precondition on shapes or arguments was violated."""

    exit_code = 2


class DataError(BFGError):
    exit_code = 3


class ParseError(DataError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class SamplingError(DataError):
    pass


class NumericError(BFGError, FloatingPointError):
    exit_code = 4


class GraphError(BFGError, RuntimeError):
    """Misuse of the computation graph (e.g. a second backward pass)."""

    exit_code = 4
