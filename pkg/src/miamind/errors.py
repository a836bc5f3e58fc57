"""Exception hierarchy. Every domain error derives from :class:`MiaError`."""


class MiaError(Exception):
    """Base class for all domain errors raised by this package."""


class ShapeMismatch(MiaError, ValueError):
    pass


class AxisOutOfRange(MiaError, IndexError):
    pass


class NonScalarLoss(MiaError, ValueError):
    pass


class BadShape(MiaError, ValueError):
    pass


class ConfigError(MiaError, ValueError):
    pass


class LabelOutOfRange(MiaError, ValueError):
    pass


class LengthMismatch(MiaError, ValueError):
    pass


class ClassOutOfRange(MiaError, ValueError):
    pass


class EmptyInput(MiaError, ValueError):
    pass


class NonBinaryInput(MiaError, ValueError):
    pass


class EmptyDataset(MiaError, ValueError):
    pass


class MissingFile(MiaError, FileNotFoundError):
    pass


class TruncatedRecord(MiaError, ValueError):
    pass


class MissingLabelColumn(MiaError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class NoValidRows(MiaError, ValueError):
    pass


class BadMagic(MiaError, ValueError):
    pass


class ChecksumMismatch(MiaError, ValueError):
    pass


class ShapeMismatchOnLoad(MiaError, ValueError):
    pass
