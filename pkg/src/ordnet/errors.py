"""Exception hierarchy shared across ordnet modules.

The CLI reports ``type(err).__name__`` on stderr, so class names double as
error codes.
"""


class OrdnetError(Exception):
    """Base class for all ordnet errors."""


# topology
class EmptySupport(OrdnetError):
    pass


class RankOrderViolation(OrdnetError):
    pass


class DuplicateCell(OrdnetError):
    pass


class UnknownCell(OrdnetError):
    pass


class OrderMismatch(OrdnetError):
    pass


class NotOnChain(OrdnetError):
    pass


# wl
class TooLarge(OrdnetError):
    pass


# tensornn
class ShapeMismatch(OrdnetError):
    pass


class NotScalar(OrdnetError):
    pass


class NonFinite(OrdnetError):
    pass


# gccn / netmodel
class MissingState(OrdnetError):
    pass


class DegenerateLink(OrdnetError):
    pass


class DisconnectedPath(OrdnetError):
    pass


class UnfittedStats(OrdnetError):
    pass


class NonPositiveLabel(OrdnetError):
    pass


class Divergence(OrdnetError):
    pass


# netsim
class BadParams(OrdnetError):
    pass


class BadScenario(OrdnetError):
    pass


class Infeasible(OrdnetError):
    pass


# datasets
class BadConfig(OrdnetError):
    pass


class MissingPrediction(OrdnetError):
    pass


class ZeroLabel(OrdnetError):
    pass
