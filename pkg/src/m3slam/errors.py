"""Exception hierarchy shared by all modules."""


class M3Error(Exception):
    pass


# geometry
class AngleAtBranchCut(M3Error):
    pass


class BehindCamera(M3Error):
    pass


class NonPositiveDepth(M3Error):
    pass


# prior / provider
class EmptyBatch(M3Error):
    pass


class BatchTooLarge(M3Error):
    pass


class DumpError(M3Error):
    pass


class BadMagic(DumpError):
    pass


class VersionMismatch(DumpError):
    pass


class DimensionMismatch(DumpError):
    pass


class TruncatedFile(DumpError):
    pass


class DegenerateGeometry(M3Error):
    pass


# matching
class MissingGroundTruth(M3Error):
    pass


class EmptyCorrespondences(M3Error):
    pass


class NonPositiveTemperature(M3Error):
    pass


# tracking / backend
class PointBehindCamera(M3Error):
    pass


class InsufficientMatches(M3Error):
    pass


class DivergedNaN(M3Error):
    pass


class ShapeMismatch(M3Error):
    pass


class DisconnectedGraph(M3Error):
    pass


# window / pipeline
class EmptyInput(M3Error):
    pass


class NoTrainingViews(M3Error):
    pass


class ConfigError(M3Error):
    pass


class ProviderError(M3Error):
    pass


class LengthMismatch(M3Error):
    pass


class DegenerateTrajectory(M3Error):
    pass
