"""Exception types raised across speclab."""


class SpeclabError(Exception):
    """Base class for all speclab errors."""


class InvalidWeights(SpeclabError, ValueError):
    pass


class InvalidTemperature(SpeclabError, ValueError):
    pass


class VocabMismatch(SpeclabError, ValueError):
    pass


class MissingContext(SpeclabError, KeyError):
    pass


class EmptyTraces(SpeclabError, ValueError):
    pass


class TooLarge(SpeclabError, ValueError):
    """Instance exceeds the exhaustive-enumeration guard."""


class MissingData(SpeclabError, ValueError):
    pass


class UnknownPreset(SpeclabError, KeyError):
    pass


class MissingTask(SpeclabError, FileNotFoundError):
    pass


class NothingToReport(SpeclabError, FileNotFoundError):
    pass


class ConfigError(SpeclabError, ValueError):
    pass


class BoundViolation(SpeclabError, AssertionError):
    """An oracle inequality failed; ``instance`` carries what is needed to reproduce it."""

    def __init__(self, message, instance=None):
        super().__init__(message)
        self.instance = instance or {}
