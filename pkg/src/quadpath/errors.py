"""Exception hierarchy shared by every stage of the pipeline.

Filesystem failures are reported with the builtin ``OSError`` family; every
data or contract violation raises a subclass of :class:`QuadpathError`.
"""


class QuadpathError(Exception):
    """Base class for data and contract errors."""


class FormatError(QuadpathError, ValueError):
    """File exists but cannot be decoded."""


class DimensionError(QuadpathError, ValueError):
    """Image has a zero-sized or otherwise invalid shape."""


class ParseError(QuadpathError, ValueError):
    pass


class DuplicateIdError(ParseError):
    pass


class LabelError(ParseError):
    pass


class DimMismatchError(QuadpathError, ValueError):
    """Feature vectors of differing dimension in one file."""


class SchemaError(QuadpathError, ValueError):
    """Serialized artifact does not match the expected structure."""


class SingularMatrixError(QuadpathError, ValueError):
    pass


class EmptyRegionError(QuadpathError, ValueError):
    pass


class DegenerateError(QuadpathError, ValueError):
    """A statistic is undefined or uninformative (constant input, zero spread)."""


class EmptyBagError(QuadpathError, ValueError):
    def __init__(self, image_id, mode):
        super().__init__(f"extraction mode {mode!s} produced no patches for image {image_id!r}")
        self.image_id = image_id
        self.mode = mode


class MissingFeatureError(QuadpathError, KeyError):
    pass


class DimError(QuadpathError, ValueError):
    """Feature dimension does not match the model."""


class NumericalError(QuadpathError, ArithmeticError):
    """Loss or parameters became non-finite."""


class SingleClassError(QuadpathError, ValueError):
    pass


class EmptyFoldError(QuadpathError, ValueError):
    pass


class UntrainedModelError(QuadpathError, ValueError):
    pass


class BackendMismatchError(QuadpathError, ValueError):
    pass


class ConfigMismatchError(QuadpathError, ValueError):
    """Artifacts produced under different configurations were combined."""
