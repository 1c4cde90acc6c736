"""Exception hierarchy shared across the package."""


class CSGError(Exception):
    """Base class for every error raised by csgos."""


# scene model
class ParseError(CSGError):
    pass


class ValidationError(CSGError):
    pass


class ResolutionError(CSGError):
    pass


# knowledge provider
class BackendUnavailable(CSGError):
    pass


class NoCategoryFound(CSGError):
    pass


# graph
class UnknownTarget(CSGError):
    pass


# tensor core
class ShapeMismatch(CSGError):
    pass


class NonFiniteValue(CSGError):
    pass


class NotScalar(CSGError):
    pass


class CheckpointError(CSGError):
    pass


# model
class MissingTarget(CSGError):
    pass


class LabelMismatch(CSGError):
    pass


class EmptyCorpus(CSGError):
    pass


# planner / simulator
class GridMismatch(CSGError):
    pass


class Unreachable(CSGError):
    pass


class NoCandidates(CSGError):
    pass


class PlanningFailed(CSGError):
    pass


class EmptyResults(CSGError):
    pass


# generator
class PlacementExhausted(CSGError):
    pass
