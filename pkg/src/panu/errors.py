"""Exception types shared across the package."""


class PanuError(Exception):
    """Base class for all panu errors."""


# -- tensor file format ------------------------------------------------------

class TensorFormatError(PanuError):
    pass


class BadMagic(TensorFormatError):
    pass


class UnsupportedVersion(TensorFormatError):
    pass


class UnsupportedDtype(TensorFormatError):
    pass


class UnsupportedRank(TensorFormatError):
    pass


class TruncatedPayload(TensorFormatError):
    pass


# -- bundle loading ----------------------------------------------------------

class MissingComponent(PanuError):
    pass


class ShapeMismatch(PanuError):
    pass


class InvariantViolation(PanuError):
    pass


# -- kernel / metric inputs --------------------------------------------------

class NonPositiveTemperature(PanuError):
    pass


class NonFiniteInput(PanuError):
    pass


class LabelOutOfRange(PanuError):
    pass


class KindMismatch(PanuError):
    pass


class VarianceBelowFloor(PanuError):
    pass


class ModeInputMismatch(PanuError):
    pass


class EmptyDataset(PanuError):
    pass


class EmptyInput(PanuError):
    pass


class EmptyMask(PanuError):
    pass


class ConfigInfeasible(PanuError):
    pass
