"""Exception hierarchy.

Every error carries a category used by the CLI to pick an exit code:
config errors exit 2, file-format errors exit 3, everything else exits 1.
"""


class RefgroundError(Exception):
    exit_code = 1


class ConfigError(RefgroundError):
    exit_code = 2


class FileFormatError(RefgroundError):
    exit_code = 3


# tensor / shapes
class ShapeMismatch(RefgroundError, ValueError):
    pass


class AxisOutOfRange(RefgroundError, ValueError):
    pass


class NonFiniteInput(RefgroundError, ValueError):
    pass


class NonScalarLoss(RefgroundError, ValueError):
    pass


# encoders
class BadGridShape(RefgroundError, ValueError):
    pass


class TokenOutOfVocab(RefgroundError, ValueError):
    pass


# reference store
class EmptyLibrary(RefgroundError, ValueError):
    pass


class DuplicateId(RefgroundError, ValueError):
    pass


class NaNQuery(RefgroundError, ValueError):
    pass


class EmptyGallery(RefgroundError, ValueError):
    pass


class UnknownSample(RefgroundError, KeyError):
    pass


class PartitionViolation(RefgroundError):
    pass


class BatchTooSmall(RefgroundError, ValueError):
    pass


class UnnormalizedInput(RefgroundError, ValueError):
    pass


class BadMagic(FileFormatError):
    pass


class VersionMismatch(FileFormatError):
    pass


class TruncatedFile(FileFormatError):
    pass


# fusion / moe
class WidthMismatch(ShapeMismatch):
    pass


class EmptyValidSet(RefgroundError, ValueError):
    pass


class TaskShapeMismatch(ShapeMismatch):
    pass


class NonPositiveTemperature(RefgroundError, ValueError):
    pass


# objectives / metrics
class DegenerateBothEmpty(RefgroundError, ValueError):
    pass


class MissingBoxTarget(RefgroundError, ValueError):
    pass


class SingleClassInput(RefgroundError, ValueError):
    pass


class EmptyEvaluationSet(RefgroundError, ValueError):
    pass


# synthetic data
class BadRate(ConfigError, ValueError):
    pass


class CaptionTooShort(RefgroundError, ValueError):
    pass


# checkpoints
class ConfigHashMismatch(FileFormatError):
    pass


class ClassWithoutPositives(UserWarning):
    """A label column has no positives; it is skipped when averaging AP."""
