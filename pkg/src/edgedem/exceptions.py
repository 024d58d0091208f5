"""Exception hierarchy for edgedem."""


class EdgeDemError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EdgeDemError, ValueError):
    pass


# radio
class EmptyNetwork(EdgeDemError, ValueError):
    pass


class EmptyAssignment(EdgeDemError, ValueError):
    pass


# latency
class InvalidAccuracy(EdgeDemError, ValueError):
    pass


class ZeroRate(EdgeDemError, ValueError):
    pass


class EmptySbs(EdgeDemError, ValueError):
    pass


class UnassignedUe(EdgeDemError, ValueError):
    pass


# alloc / matching
class NonConvergence(EdgeDemError, RuntimeError):
    pass


class TooLarge(EdgeDemError, ValueError):
    pass


# learning
class EmptyDataset(EdgeDemError, ValueError):
    pass


class MissingAncestor(EdgeDemError, KeyError):
    pass


class DivergenceDetected(EdgeDemError, FloatingPointError):
    pass


class EmptyGroup(EdgeDemError, ValueError):
    pass


# data
class InsufficientSamples(EdgeDemError, ValueError):
    pass


class BadMagic(EdgeDemError, ValueError):
    pass


class CountMismatch(EdgeDemError, ValueError):
    pass


class TruncatedFile(EdgeDemError, ValueError):
    pass
