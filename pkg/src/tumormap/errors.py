"""Exception hierarchy shared by all pipeline stages."""


class PipelineError(Exception):
    """Base class for every error raised by this package."""


# --- slide reading -----------------------------------------------------------

class UnsupportedFormat(PipelineError):
    """Image is not a PNG or 8-bit RGB TIFF."""


class CorruptImage(PipelineError):
    """Image could not be decoded, or its pyramid metadata is inconsistent."""


class EmptyImage(PipelineError):
    """Image has zero area."""


class NoTiles(PipelineError):
    """Level is smaller than a single tile in at least one dimension."""


class OutOfBounds(PipelineError):
    """Requested tile or region lies outside the level."""


# --- stain estimation / normalization ---------------------------------------

class InsufficientTissue(PipelineError):
    """Too few optical-density pixels survive the transparency filter."""


class DegenerateStains(PipelineError):
    """The two extreme stain directions are (nearly) identical."""


class SingularStainMatrix(PipelineError):
    """Stain matrix columns are linearly dependent."""


# --- classifier port ---------------------------------------------------------

class ModelLoadError(PipelineError):
    """Classifier definition file is missing or malformed."""


class InferenceError(PipelineError):
    """The classifier backend failed while scoring a batch."""


class ShapeError(PipelineError):
    """Tile pixel array does not match the classifier's expected input shape."""


class BackendUnavailable(PipelineError):
    """Requested classifier backend is not installed in this environment."""


# --- heatmap / geometry ------------------------------------------------------

class DuplicateTile(PipelineError):
    """Two scores target the same grid cell."""


class CoordOutOfGrid(PipelineError):
    """Score coordinate lies outside the probability grid."""


class UnknownColormap(PipelineError):
    """Colormap name is not registered."""


class InvalidRing(PipelineError):
    """Polygon ring is open or has fewer than four points."""


# --- metrics -----------------------------------------------------------------

class EmptyInput(PipelineError):
    """Metric requested over an empty score list."""


class UndefinedMetric(PipelineError):
    """Metric denominator is zero for every requested quantity."""


class OneClassOnly(PipelineError):
    """Both classes are required but only one is present."""


# --- cohort balancing --------------------------------------------------------

class InsufficientClass(PipelineError):
    """A class cannot meet its quota without oversampling."""


class MissingPatientId(PipelineError):
    """Patient-level balancing requires a patient id on every entry."""


# --- orchestration -----------------------------------------------------------

class ConfigError(PipelineError):
    """Pipeline configuration file is missing, malformed, or inconsistent."""
