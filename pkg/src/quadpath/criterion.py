"""Splitting criteria and dataset-level threshold calibration."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .colorspace import RUIFROK_HE, ColorSpace, StainMatrix, to_plane
from .errors import DegenerateError, EmptyRegionError, SchemaError
from .imageio import DatasetManifest, load_image, read_json, write_json

__all__ = [
    "CriterionKind",
    "CriterionConfig",
    "CriterionStats",
    "entropy",
    "mean_pixel",
    "evaluate",
    "evaluate_plane",
    "criterion_values",
    "stats_from_values",
    "calibrate_threshold",
    "save_stats",
    "load_stats",
]

log = logging.getLogger(__name__)


class CriterionKind(str, enum.Enum):
    ENTROPY = "entropy"
    MEAN = "mean"


@dataclass(frozen=True)
class CriterionConfig:
    kind: CriterionKind = CriterionKind.MEAN
    space: ColorSpace = ColorSpace.HAEMATOXYLIN
    k: float = -1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", CriterionKind(self.kind))
        object.__setattr__(self, "space", ColorSpace(self.space))
        object.__setattr__(self, "k", float(self.k))
        if not math.isfinite(self.k):
            raise ValueError(f"k must be finite, got {self.k}")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "space": self.space.value, "k": self.k}


def _nonempty(plane) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.size == 0:
        raise EmptyRegionError("criterion evaluated on an empty region")
    return plane


def histogram256(plane) -> np.ndarray:
    """Counts over 256 integer bins: floor, then clamp to 0..255."""
    bins = np.clip(np.floor(_nonempty(plane)), 0, 255).astype(np.intp)
    return np.bincount(bins.ravel(), minlength=256)


def entropy(plane) -> float:
    """Shannon entropy in bits of the 256-bin histogram of ``plane``."""
    counts = histogram256(plane)
    p = counts[counts > 0] / counts.sum()
    return float(max(0.0, -np.sum(p * np.log2(p))))


def mean_pixel(plane) -> float:
    return float(np.mean(_nonempty(plane)))


def evaluate_plane(plane, kind) -> float:
    if CriterionKind(kind) is CriterionKind.ENTROPY:
        return entropy(plane)
    return mean_pixel(plane)


def evaluate(region, config: CriterionConfig, stains: StainMatrix = RUIFROK_HE) -> float:
    """Criterion of an RGB region in the configured colour space."""
    return evaluate_plane(to_plane(region, config.space, stains), config.kind)


@dataclass
class CriterionStats:
    per_image: dict[str, float]
    mu: float
    sigma: float
    k: float
    threshold: float
    config: CriterionConfig = field(default_factory=CriterionConfig)

    @property
    def degenerate(self) -> bool:
        return self.sigma == 0.0

    def with_k(self, k: float) -> "CriterionStats":
        k = float(k)
        cfg = CriterionConfig(self.config.kind, self.config.space, k)
        return CriterionStats(dict(self.per_image), self.mu, self.sigma, k, self.mu + k * self.sigma, cfg)

    def to_dict(self) -> dict:
        return {
            "per_image": dict(sorted(self.per_image.items())),
            "mu": self.mu,
            "sigma": self.sigma,
            "k": self.k,
            "threshold": self.threshold,
            "criterion": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CriterionStats":
        try:
            cfg = CriterionConfig(**d["criterion"])
            stats = cls(
                {str(k): float(v) for k, v in d["per_image"].items()},
                float(d["mu"]),
                float(d["sigma"]),
                float(d["k"]),
                float(d["threshold"]),
                cfg,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed criterion stats: {exc}") from None
        if stats.threshold != stats.mu + stats.k * stats.sigma:
            raise SchemaError("threshold != mu + k * sigma")
        return stats


def stats_from_values(values: Mapping[str, float], config: CriterionConfig, strict: bool = False) -> CriterionStats:
    """Population mean and standard deviation of per-image criterion values.

    Sums use ``math.fsum`` (exactly rounded), so the result does not depend on
    the order of ``values``.
    """
    if len(values) < 2:
        raise DegenerateError(f"threshold calibration needs at least 2 images, got {len(values)}")
    vals = [float(values[k]) for k in sorted(values)]
    n = len(vals)
    mu = math.fsum(vals) / n
    sigma = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / n)
    if sigma == 0.0:
        msg = "criterion values have zero spread; threshold equals the mean"
        if strict:
            raise DegenerateError(msg)
        log.warning(msg)
    return CriterionStats(
        {k: float(values[k]) for k in sorted(values)},
        mu,
        sigma,
        config.k,
        mu + config.k * sigma,
        config,
    )


def criterion_values(
    manifest: DatasetManifest, config: CriterionConfig, stains: StainMatrix = RUIFROK_HE, pool=None
) -> dict[str, float]:
    """Root-level criterion value of every image in ``manifest``."""
    paths = [str(manifest.resolve(e)) for e in manifest]
    args = [(p, config, stains) for p in paths]
    mapper = pool.map if pool is not None else map
    vals = list(mapper(_image_criterion, args))
    return {e.image_id: v for e, v in zip(manifest, vals)}


def _image_criterion(args) -> float:
    path, config, stains = args
    return evaluate(load_image(path), config, stains)


def calibrate_threshold(
    manifest: DatasetManifest,
    config: CriterionConfig,
    stains: StainMatrix = RUIFROK_HE,
    strict: bool = False,
    pool=None,
) -> CriterionStats:
    """Evaluate the criterion on every full image and derive ``t = mu + k * sigma``.

    A zero spread is logged and leaves ``t = mu``; pass ``strict=True`` to raise
    :class:`DegenerateError` instead.
    """
    return stats_from_values(criterion_values(manifest, config, stains, pool), config, strict)


def save_stats(stats: CriterionStats, path, provenance: Mapping | None = None) -> None:
    d = stats.to_dict()
    if provenance is not None:
        d["provenance"] = dict(provenance)
    write_json(path, d)


def load_stats(path) -> CriterionStats:
    return CriterionStats.from_dict(read_json(path))
