"""Exception hierarchy shared by all mmrefine modules."""


class MMRefineError(Exception):
    """Base class for every error raised by this package."""


# geometry
class NonPositiveDepth(MMRefineError, ValueError):
    pass


class ZeroVector(MMRefineError, ValueError):
    pass


# dynamic reconstruction
class DegenerateRays(MMRefineError, ValueError):
    pass


class UnderdeterminedObject(MMRefineError, ValueError):
    pass


class CheiralityViolation(MMRefineError):
    pass


class NotConverged(MMRefineError):
    """Raised only by ``solve(..., strict=True)``; carries the best iterate."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


# rigid motion
class TooFewStatic(MMRefineError, ValueError):
    pass


class DegenerateConfiguration(MMRefineError, ValueError):
    pass


class EmptyPointSet(MMRefineError, ValueError):
    pass


class NoTemporalOverlap(MMRefineError, ValueError):
    pass


class NonMonotonicTimestamps(MMRefineError, ValueError):
    pass


class OutOfRange(MMRefineError, ValueError):
    pass


# spurious filter
class NonPositiveDt(MMRefineError, ValueError):
    pass


# cfar
class WindowTooLarge(MMRefineError, ValueError):
    pass


class InvalidRank(MMRefineError, ValueError):
    pass


class MissingAngleMap(MMRefineError, ValueError):
    pass


# metrics
class EmptyTruth(MMRefineError, ValueError):
    pass


class EmptyCloud(MMRefineError, ValueError):
    pass


# simulator / io
class InvalidConfig(MMRefineError, ValueError):
    """Configuration error; ``line`` is the 1-based line of the offending key when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IoFailure(MMRefineError, OSError):
    pass
