"""Exception types shared across the package.

Two broad families: ``ValidationError`` for bad inputs (malformed files,
shape mismatches, out-of-range arguments) and ``ComputeError`` for failures
that surface mid-computation (non-finite values, aborted training). The CLI
maps them to exit codes 1 and 2 respectively.
"""


class MvShapeError(Exception):
    pass


class ValidationError(MvShapeError):
    pass


class ComputeError(MvShapeError):
    pass


# --- mesh parsing / geometry ---

class MalformedHeader(ValidationError):
    pass


class TruncatedFile(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class NonFiniteCoordinate(ValidationError):
    pass


class MalformedFace(ValidationError):
    pass


class EmptyMesh(ValidationError):
    pass


class DegenerateExtent(ValidationError):
    pass


class UnknownGeneratorKind(ValidationError):
    pass


# --- renderer ---

class ViewIndexOutOfRange(ValidationError):
    pass


class DegenerateCamera(ValidationError):
    pass


class UnsupportedMagic(ValidationError):
    pass


class TruncatedPixelData(ValidationError):
    pass


class IoFailure(ComputeError):
    pass


# --- tensor / autodiff ---

class ShapeMismatch(ValidationError):
    pass


class NonFiniteValue(ComputeError):
    pass


class NonScalarLoss(ValidationError):
    pass


# --- data / embeddings ---

class InconsistentViewCount(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class UnknownSplit(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class MissingSidecar(ValidationError):
    pass


class MissingStats(ValidationError):
    pass


# --- model / checkpoints ---

class ShapeManifestMismatch(ValidationError):
    pass


class MissingFile(ValidationError):
    pass


# --- losses ---

class LabelOutOfRange(ValidationError):
    pass


class AnchorWithoutPositive(ValidationError):
    pass


class AnchorWithoutNegative(ValidationError):
    pass


# --- training / evaluation ---

class NonFiniteLoss(ComputeError):
    pass


class CorpusTooSmall(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class NoRelevantItems(ValidationError):
    pass


class ConfigError(ValidationError):
    pass
