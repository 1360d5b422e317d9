"""Exception types shared across the package.

Every operation that can fail raises one of these rather than a bare
ValueError, so callers (CLI, service) can map failures to exit codes and
HTTP statuses without string matching.
"""


class CxrSearchError(Exception):
    """Base class for all package errors."""


class ParseError(CxrSearchError):
    """Malformed manifest / JSON document."""


class DuplicateId(CxrSearchError):
    """An id occurs more than once where uniqueness is required."""


class MissingFile(CxrSearchError):
    """A referenced file path does not resolve."""


class InsufficientClassCount(CxrSearchError):
    """A class has too few records for the requested operation."""


class NonFiniteInput(CxrSearchError):
    """Input contains NaN or infinity."""


class ShapeMismatch(CxrSearchError):
    """Array shapes do not agree with the operation's contract."""


class ZeroVector(CxrSearchError):
    """A zero-norm vector where a direction is required."""


class DegenerateBatch(CxrSearchError):
    """A batch anchor is missing positive or negative candidates."""


class EmptyClass(CxrSearchError):
    """A class has no records to sample from."""


class NonFiniteLoss(CxrSearchError):
    """Training loss became NaN or infinite."""


class InvalidConfig(CxrSearchError):
    """Configuration violates a structural invariant."""


class NotNormalized(CxrSearchError):
    """An embedding row is not unit-norm."""


class EmptyIndex(CxrSearchError):
    """Query against an index with zero rows."""


class EmptyResult(CxrSearchError):
    """A retrieval result with no entries where one is required."""


class IdOverlap(CxrSearchError):
    """Query ids intersect the gallery ids."""


class SchemaError(CxrSearchError):
    """Serialized artifact does not match its schema."""


class HashMismatch(CxrSearchError):
    """Model content hash disagreement in strict mode."""


class NonFinite(CxrSearchError):
    """Non-finite values in a feature vector."""


class InsufficientSamples(CxrSearchError):
    """Not enough samples per class for cross-validation."""


class SingleClass(CxrSearchError):
    """Both classes are required but only one is present."""


class SingularFit(CxrSearchError):
    """Classifier design matrix is degenerate."""


class IoError(CxrSearchError):
    """Filesystem read/write failure."""
