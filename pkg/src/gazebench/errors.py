"""Exception hierarchy shared across the pipeline."""


class GazebenchError(Exception):
    """Base class for all library errors."""


class BehindCamera(GazebenchError):
    pass


class ConfigInvalid(GazebenchError, ValueError):
    pass


class MarkerOverflow(GazebenchError, ValueError):
    pass


class NoOverlap(GazebenchError):
    pass


class AmbiguousSync(GazebenchError):
    pass


class ClipTooShort(GazebenchError, ValueError):
    pass


class ShapeMismatch(GazebenchError, ValueError):
    pass


class NotARotation(GazebenchError, ValueError):
    pass


class NonFiniteGradient(GazebenchError, FloatingPointError):
    pass


class DatasetEmpty(GazebenchError, ValueError):
    pass


class PairMismatch(GazebenchError, ValueError):
    pass


class CorruptCheckpoint(GazebenchError):
    pass


class CorruptTensorFile(GazebenchError):
    pass


class EmptyEvalSet(GazebenchError, ValueError):
    pass


class NoSessions(GazebenchError):
    pass
