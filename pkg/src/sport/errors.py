"""Exception hierarchy shared by every subsystem."""


class SportError(Exception):
    """Base class for all errors raised by this package."""


# geometry
class DegenerateRotation(SportError, ValueError):
    pass


class EmptyCloud(SportError, ValueError):
    pass


class NoVisiblePoints(SportError):
    pass


# scene
class ZeroDistance(SportError, ValueError):
    pass


class RegionSamplingExhausted(SportError):
    pass


class SceneMismatch(SportError, ValueError):
    pass


# datagen
class UnknownCategory(SportError, KeyError):
    pass


class GenerationExhausted(SportError):
    pass


class EmptyTemplateBank(SportError, ValueError):
    pass


class UnparseableInstruction(SportError, ValueError):
    pass


class FormatError(SportError, ValueError):
    """A file on disk does not follow the expected layout or version."""


# nn / encoder / diffusion
class ShapeMismatch(SportError, ValueError):
    pass


class NotScalarLoss(SportError, ValueError):
    pass


class MissingGradient(SportError):
    pass


class EmptyText(SportError, ValueError):
    pass


class NonFinite(SportError, ValueError):
    pass


class AlignmentError(SportError, ValueError):
    pass


class BadTimestep(SportError, ValueError):
    pass


class NonFiniteLoss(SportError, FloatingPointError):
    pass


class SamplingDegenerate(SportError):
    pass


class EmptyResults(SportError, ValueError):
    pass


class ConfigError(SportError, ValueError):
    pass
