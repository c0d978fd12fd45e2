"""Per-pixel reductions of an RGB region to a scalar plane in [0, 255].

Three planes are available: BT.601 luminance, blue ratio, and haematoxylin
concentration from colour deconvolution. All transforms are pointwise, so the
plane of a sub-region equals the same slice of the full-image plane; the
quadtree builder relies on this to transform each image once.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRegionError, SingularMatrixError

__all__ = [
    "ColorSpace",
    "StainMatrix",
    "RUIFROK_HE",
    "OD_MAX",
    "to_luminance",
    "to_blue_ratio",
    "deconvolve",
    "deconvolve_haematoxylin",
    "to_plane",
]

# -log10(1/256): optical density of a fully absorbing 8-bit pixel
OD_MAX = float(np.log10(256.0))

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ColorSpace(str, enum.Enum):
    LUMINANCE = "luminance"
    BLUE_RATIO = "blue_ratio"
    HAEMATOXYLIN = "haematoxylin"


@dataclass(frozen=True, eq=False)
class StainMatrix:
    """Three unit-norm stain vectors (rows) in optical-density space.

    Rows are haematoxylin, eosin, residual. Rows are normalized on
    construction.
    """

    rows: np.ndarray

    def __post_init__(self):
        m = np.array(self.rows, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise SingularMatrixError("stain matrix contains non-finite values")
        if np.any(m < 0):
            raise ValueError("stain vectors must be non-negative in optical-density space")
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms == 0):
            raise SingularMatrixError("stain matrix has a zero row")
        # rows already of unit norm are kept bit-exact so reloading is idempotent
        m = np.where(np.abs(norms - 1.0)[:, None] < 1e-12, m, m / norms[:, None])
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularMatrixError(f"stain matrix is not invertible (cond={cond:.3g})")
        m.setflags(write=False)
        object.__setattr__(self, "rows", m)
        inv = np.linalg.inv(m)
        inv.setflags(write=False)
        object.__setattr__(self, "_inverse", inv)

    @property
    def inverse(self) -> np.ndarray:
        return self._inverse

    @classmethod
    def from_values(cls, values) -> "StainMatrix":
        """Build from 9 reals in row-major order (the config-file form)."""
        vals = [float(v) for v in values]
        if len(vals) != 9:
            raise SingularMatrixError(f"stain matrix needs 9 values, got {len(vals)}")
        return cls(np.array(vals).reshape(3, 3))

    def to_values(self) -> list[float]:
        return [float(v) for v in self.rows.ravel()]

    def __eq__(self, other):
        return isinstance(other, StainMatrix) and np.array_equal(self.rows, other.rows)

    def __hash__(self):
        return hash(self.rows.tobytes())


# Ruifrok & Johnston H&E vectors
RUIFROK_HE = StainMatrix(
    np.array(
        [
            [0.65, 0.70, 0.29],
            [0.07, 0.99, 0.11],
            [0.27, 0.57, 0.78],
        ]
    )
)


def _rgb(region) -> np.ndarray:
    region = np.asarray(region)
    if region.ndim != 3 or region.shape[2] != 3:
        raise EmptyRegionError(f"expected an (H, W, 3) region, got shape {region.shape}")
    if region.shape[0] == 0 or region.shape[1] == 0:
        raise EmptyRegionError("region is empty")
    return region.astype(np.float64)


def _mix(x: np.ndarray, w) -> np.ndarray:
    # explicit per-pixel sum; a BLAS product may round differently with array shape
    return x[..., 0] * w[0] + x[..., 1] * w[1] + x[..., 2] * w[2]


def to_luminance(region) -> np.ndarray:
    return np.clip(_mix(_rgb(region), LUMA_WEIGHTS), 0.0, 255.0)


def to_blue_ratio(region) -> np.ndarray:
    rgb = _rgb(region)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    br = (100.0 * b / (1.0 + r + g)) * (255.0 / (1.0 + r + g + b))
    return np.clip(br, 0.0, 255.0)


def optical_density(region) -> np.ndarray:
    return -np.log10((_rgb(region) + 1.0) / 256.0)


def deconvolve(region, stains: StainMatrix = RUIFROK_HE) -> np.ndarray:
    """Raw stain concentrations, shape (H, W, 3), in optical-density units.

    Solves ``OD = c @ rows`` per pixel, i.e. ``c = OD @ inv(rows)``.
    """
    od = optical_density(region)
    inv = stains.inverse
    return np.stack([_mix(od, inv[:, j]) for j in range(3)], axis=-1)


def deconvolve_haematoxylin(region, stains: StainMatrix = RUIFROK_HE) -> np.ndarray:
    h = _mix(optical_density(region), stains.inverse[:, 0])
    return np.clip(h * (255.0 / OD_MAX), 0.0, 255.0)


def to_plane(region, space, stains: StainMatrix = RUIFROK_HE) -> np.ndarray:
    space = ColorSpace(space)
    if space is ColorSpace.LUMINANCE:
        return to_luminance(region)
    if space is ColorSpace.BLUE_RATIO:
        return to_blue_ratio(region)
    return deconvolve_haematoxylin(region, stains)


def synthesize(concentrations, stains: StainMatrix = RUIFROK_HE) -> np.ndarray:
    """Forward stain model: per-pixel concentrations (..., 3) to 8-bit RGB."""
    od = np.asarray(concentrations, dtype=np.float64) @ stains.rows
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
