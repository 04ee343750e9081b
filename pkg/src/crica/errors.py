"""Exception types shared across the package."""


class CricaError(Exception):
    """Base class for all errors raised by this package."""


# --- tensor engine ---

class ShapeMismatch(CricaError):
    pass


class InvalidAxis(CricaError):
    pass


class EvenKernel(CricaError):
    pass


class NonPositiveBase(CricaError):
    pass


class EmptyTape(CricaError):
    pass


class NonScalarOutput(CricaError):
    pass


# --- model ---

class BadImageSize(CricaError):
    pass


class HeadMismatch(CricaError):
    pass


class GridMismatch(CricaError):
    pass


class GridTooSmall(CricaError):
    pass


class EmptyRegion(CricaError):
    pass


class RaggedSequences(CricaError):
    pass


class ZeroVector(CricaError):
    pass


# --- training ---

class NonUnitRows(CricaError):
    pass


class InsufficientPlaces(CricaError):
    pass


# --- descriptor reduction ---

class TooFewSamples(CricaError):
    pass


class DimMismatch(CricaError):
    pass


# --- retrieval ---

class MissingMetadata(CricaError):
    pass


class DuplicateId(CricaError):
    pass


class EmptyIndex(CricaError):
    pass


class UnknownRule(CricaError):
    pass


class MissingQuery(CricaError):
    pass


# --- data generation / IO ---

class CanvasTooSmall(CricaError):
    pass


class ConfigError(CricaError):
    pass


class BadCheckpoint(CricaError):
    pass
