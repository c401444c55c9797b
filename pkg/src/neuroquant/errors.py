"""Exception hierarchy shared by all pipeline stages."""


class NeuroquantError(Exception):
    """Base class for every error raised by this package."""


# -- file formats -----------------------------------------------------------

class FormatError(NeuroquantError):
    pass


class BadMagic(FormatError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class TruncatedData(FormatError):
    pass


class NonFinite(FormatError):
    pass


class RangeOverflow(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ConfigMismatch(FormatError):
    pass


class SchemaError(FormatError):
    pass


# -- geometry / intensity -----------------------------------------------------

class ObliqueAffine(NeuroquantError):
    pass


class GridMismatch(NeuroquantError):
    pass


class DegenerateIntensityRange(NeuroquantError):
    pass


class EmptyMask(NeuroquantError):
    pass


class EmptyOverlap(NeuroquantError):
    pass


class ZeroReference(NeuroquantError):
    pass


# -- cohort ---------------------------------------------------------------------

class InsufficientSubjects(NeuroquantError):
    pass


class DegenerateGroup(NeuroquantError):
    pass


# -- network --------------------------------------------------------------------

class ShapeMismatch(NeuroquantError):
    pass


class NonFiniteActivation(NeuroquantError):
    pass


class NonFiniteGradient(NeuroquantError):
    pass


class NonFiniteLoss(NeuroquantError):
    pass


class SingleClassFold(NeuroquantError):
    pass


class FoldMismatch(NeuroquantError):
    pass


# -- metrics / occlusion --------------------------------------------------------

class SingleClass(NeuroquantError):
    """Both label classes are required but only one is present."""


class TooSmall(NeuroquantError):
    pass


class ScorerChannelMismatch(NeuroquantError):
    pass


class ConfigError(NeuroquantError):
    """Invalid or incomplete run configuration."""
