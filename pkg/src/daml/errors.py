"""Exception types raised across the package."""


class DAMLError(Exception):
    pass


class ConfigError(DAMLError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


class MalformedName(DAMLError, ValueError):
    pass


class InsufficientClasses(DAMLError, ValueError):
    pass


class ShapeMismatch(DAMLError, ValueError):
    pass


class ZeroVector(DAMLError, ValueError):
    pass


class EmptyCluster(DAMLError, RuntimeError):
    pass


class NoPreviousClassifier(DAMLError, RuntimeError):
    pass


class InvalidState(DAMLError, RuntimeError):
    pass


class DegenerateBatch(DAMLError, ValueError):
    pass


class LabelOutOfRange(DAMLError, ValueError):
    pass


class ClassCountMismatch(DAMLError, ValueError):
    pass


class EpochSkipped(DAMLError, RuntimeError):
    pass


class NoValidGallery(DAMLError, ValueError):
    pass
