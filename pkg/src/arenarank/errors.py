"""Exception hierarchy.

``InputError`` subclasses are caller mistakes (bad files, bad arguments);
``StatisticalError`` subclasses mean the data cannot support the requested
estimate. The CLI maps them to exit codes 1 and 2 respectively.
"""


class ArenaRankError(Exception):
    pass


class InputError(ArenaRankError, ValueError):
    pass


class LogParseError(InputError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class SchemaError(InputError):
    pass


class ValidationError(InputError):
    pass


class InvalidPairError(InputError):
    pass


class InsufficientDataError(InputError):
    pass


class StatisticalError(ArenaRankError):
    pass


class NonIdentifiableError(StatisticalError):
    pass


class SingularInformationError(StatisticalError):
    def __init__(self, message: str, cluster=()):
        super().__init__(message)
        self.cluster = tuple(cluster)


class NotPositiveDefiniteError(StatisticalError):
    pass


class BootstrapError(StatisticalError):
    pass
