"""Exception types raised across the package."""


class CorrposeError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(CorrposeError):
    pass


class NotARotation(CorrposeError):
    pass


class DegenerateBBox(CorrposeError):
    pass


class EmptyRender(CorrposeError):
    pass


class TooManyRegions(CorrposeError):
    pass


class ShapeMismatch(CorrposeError):
    pass


class TooFewCorrespondences(CorrposeError):
    pass


class NoConsensus(CorrposeError):
    pass


class NoValidLines(CorrposeError):
    pass


class DivergedPose(CorrposeError):
    pass


class SourceFailure(CorrposeError):
    pass


class NoHypotheses(CorrposeError):
    pass


class AllHypothesesFailed(CorrposeError):
    pass


class ZeroGtTranslation(CorrposeError):
    pass


class EmptyInput(CorrposeError):
    pass


class FormatError(CorrposeError):
    """Malformed tensor file, manifest or config."""
