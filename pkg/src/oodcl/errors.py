"""Exception hierarchy shared by every module."""


class OODCLError(Exception):
    """Base class for all library errors."""


class ZeroVector(OODCLError, ValueError):
    """A vector was too small to normalize."""


class DimensionMismatch(OODCLError, ValueError):
    pass


class EmptyInput(OODCLError, ValueError):
    pass


class NoPositivePairs(OODCLError, ValueError):
    """No anchor in a contrastive batch has a same-label partner."""


class UnknownClass(OODCLError, ValueError):
    pass


class MissingOOD(OODCLError, ValueError):
    """A training variant that needs OOD samples received none."""


class MissingInput(OODCLError, ValueError):
    pass


class SingleClassBatch(OODCLError, ValueError):
    pass


class NonPositiveScale(OODCLError, ValueError):
    pass


class NonFiniteLoss(OODCLError, ArithmeticError):
    pass


class PlacementFailure(OODCLError, RuntimeError):
    """Cluster means could not be placed at the requested separation."""


class ParseError(OODCLError, ValueError):
    pass


class ConfigError(OODCLError, ValueError):
    pass
