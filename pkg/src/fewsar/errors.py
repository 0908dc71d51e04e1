"""Exception hierarchy shared across the package.

Every error raised by fewsar derives from :class:`FewsarError`, so callers
(and the CLI) can map failures onto stable categories.
"""


class FewsarError(Exception):
    """Base class for all package errors."""

    category = "runtime"


class ParameterError(FewsarError, ValueError):
    """An argument violates its documented range or ordering."""

    category = "bad-parameter"


class ShapeError(FewsarError, ValueError):
    """An array has an incompatible shape or dimension."""

    category = "bad-shape"


class DataError(FewsarError):
    """Problems with chip pools, manifests, or image files."""

    category = "data"


class ManifestLoadError(DataError):
    """A manifest or a referenced image file could not be read."""

    category = "manifest-load"


class SchemaError(DataError):
    """A manifest record violates the documented schema."""

    category = "manifest-schema"


class EmptyPoolError(DataError):
    """An operation received or produced a pool with no chips."""

    category = "empty-pool"


class SamplingError(FewsarError):
    """Episode sampling could not satisfy the requested sizes."""

    category = "sampling"


class DegenerateBatchError(FewsarError):
    """A loss or trainer received a batch too small or single-class."""

    category = "degenerate-batch"


class NormalizationError(FewsarError):
    """A vector with (near-)zero norm cannot be normalized."""

    category = "normalization"


class ConfigurationError(FewsarError):
    """A run/training configuration is inconsistent or incomplete."""

    category = "config-invalid"


class ProtocolViolationError(FewsarError):
    """An evaluation protocol constraint was violated (e.g. OOD/OE overlap)."""

    category = "protocol-violation"


class MetricError(FewsarError):
    """A metric received degenerate input (e.g. an empty score list)."""

    category = "metric"
