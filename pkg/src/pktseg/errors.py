"""Exception hierarchy.

``ValidationError`` subclasses describe bad inputs (the CLI maps them to exit
code 1); everything else derived from ``PktsegError`` is a runtime failure
(exit code 2).
"""


class PktsegError(Exception):
    pass


class ValidationError(PktsegError, ValueError):
    pass


# volume-io
class MissingFile(ValidationError, FileNotFoundError):
    pass


class HeaderMismatch(ValidationError):
    pass


class NonFiniteVoxel(ValidationError):
    pass


class IoFailure(PktsegError, OSError):
    pass


class ParseError(ValidationError):
    pass


class DuplicateStudyId(ValidationError):
    pass


class MissingSequenceFile(ValidationError):
    pass


# preprocess
class ZeroVariance(ValidationError):
    pass


class PatchLargerThanVolume(ValidationError):
    pass


class MissingSequence(ValidationError):
    pass


class ChannelMismatch(ValidationError):
    pass


# nn
class ShapeMismatch(ValidationError):
    pass


class DegenerateBatch(PktsegError):
    pass


class OddDimension(ValidationError):
    pass


# architectures
class IndivisibleDims(ValidationError):
    pass


class CheckpointMismatch(ValidationError):
    pass


# metrics
class GridMismatch(ValidationError):
    pass


class EmptyDenominator(PktsegError):
    pass


class EmptyMask(PktsegError):
    pass


class TooFewPairs(PktsegError):
    pass


class CaseSetMismatch(ValidationError):
    pass


# phantom
class GeometryOverflow(ValidationError):
    pass


# harness
class DatasetTooSmall(ValidationError):
    pass


class NonFiniteLoss(PktsegError):
    pass


class MissingDependency(PktsegError):
    pass


class UnknownSubcommand(ValidationError):
    pass


class ConfigParseError(ValidationError):
    pass
