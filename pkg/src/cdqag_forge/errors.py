"""Exception hierarchy shared across the toolkit."""


class CdqagError(Exception):
    """Base class for all toolkit errors."""


# raster_io
class MalformedFile(CdqagError):
    pass


class ClassIdOutOfRange(CdqagError):
    pass


class EmptyImage(CdqagError):
    pass


class SizeMismatch(CdqagError):
    pass


class InvalidRuns(CdqagError):
    pass


# change_analysis
class DimensionMismatch(CdqagError):
    pass


class SameClass(CdqagError):
    pass


# triplet_engine
class TemplateOutOfRange(CdqagError):
    pass


class BadRatios(CdqagError):
    pass


class EmptyDataset(CdqagError):
    pass


# metrics
class NonFiniteScore(CdqagError):
    pass


class MissingPrediction(CdqagError):
    pass


class DuplicatePrediction(CdqagError):
    pass


class UnknownTripletId(CdqagError):
    pass


# tensor_core
class ShapeMismatch(CdqagError):
    pass


class BadStride(CdqagError):
    pass


class BadFactor(CdqagError):
    pass


class HeadMismatch(CdqagError):
    pass


class NonFinite(CdqagError):
    pass


# vista model
class TokenOutOfVocab(CdqagError):
    pass


class TooLong(CdqagError):
    pass


# losses
class BadTarget(CdqagError):
    pass


class Divergence(CdqagError):
    pass
