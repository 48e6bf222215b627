class NsedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(NsedError):
    pass


class DataError(NsedError):
    pass


class VocabularyError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class LengthError(DataError):
    pass


class NumericalError(NsedError):
    """Raised when a loss or a validation metric stops being finite."""
