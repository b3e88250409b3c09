"""Exception types shared across the package.

Every error raised on a contract violation derives from VideofaceError so
callers (and the CLI) can distinguish our failures from genuine bugs.
"""


class VideofaceError(Exception):
    """Base class for all package errors."""


class ParameterError(VideofaceError):
    """An argument value is outside its documented domain."""


class DimensionError(VideofaceError):
    """Array shapes are inconsistent with the operation's contract."""


class GraphError(VideofaceError):
    """A model graph fails validation; message names the offending layer."""


class DegenerateCropError(VideofaceError):
    """A fractional crop box rounds to an empty pixel rectangle."""


class NormalizationError(VideofaceError):
    """A vector with (near-)zero norm cannot be normalized."""


class CompositionError(VideofaceError):
    """A batch cannot be composed from the available records."""


class MiningError(VideofaceError):
    """Negative mining is impossible (e.g. a single-subject batch)."""


class ManifestError(VideofaceError):
    """A dataset manifest line or field is malformed."""


class ImageFormatError(VideofaceError):
    """An image file is not a supported binary PGM/PPM."""


class CheckpointError(VideofaceError):
    """A checkpoint file is truncated, misordered, or has a bad magic."""


class ConfigError(VideofaceError):
    """A config file has unknown keys or ill-typed values."""


class MetricError(VideofaceError):
    """An evaluation metric is undefined for the given inputs."""


class SimilarityError(VideofaceError):
    """Similarity is undefined (zero-norm representation)."""


class TrainingDiverged(VideofaceError):
    """A non-finite loss or gradient was produced during training."""
