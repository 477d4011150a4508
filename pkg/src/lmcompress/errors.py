"""Exception hierarchy shared by all modules."""


class LmCompressError(Exception):
    pass


class ShapeError(LmCompressError, ValueError):
    pass


class RankError(LmCompressError, ValueError):
    pass


class IngestionError(LmCompressError, ValueError):
    pass


class VocabError(LmCompressError, ValueError):
    pass


class CompatibilityError(LmCompressError, ValueError):
    pass


class NumericError(LmCompressError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(NumericError):
    pass


class StorageError(LmCompressError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class FormatError(LmCompressError, ValueError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
