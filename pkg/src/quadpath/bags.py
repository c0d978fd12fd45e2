"""Bags of instances: patch extraction, tissue masking, augmentation and featurization."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .colorspace import to_luminance
from .criterion import entropy
from .errors import DegenerateError, DimMismatchError, EmptyBagError, LabelError, MissingFeatureError, SchemaError
from .imageio import FeatureFile, FeatureRecord, as_image, read_features, read_json, write_features, write_json
from .quadtree import DEFAULT_PATCH_SIZE, Quadtree, Rect

__all__ = [
    "ExtractionMode",
    "Instance",
    "Bag",
    "AugmentationConfig",
    "extract_instances",
    "grid_rects",
    "otsu_threshold",
    "tissue_mask",
    "augment",
    "jitter",
    "builtin_features",
    "ExternalFeatures",
    "featurize_instances",
    "BUILTIN_DIM",
    "bag_seed",
    "save_bags",
    "load_bags",
]

BUILTIN_DIM = 56
HIST_BINS = 16
_GRAD_SCALE = 255.0 * np.sqrt(2.0)


class ExtractionMode(str, enum.Enum):
    QUADTREE_ALL = "quadtree_all"
    QUADTREE_LEAF = "quadtree_leaf"
    ALL_PATCHES = "all_patches"
    TISSUE_MASK = "tissue_mask"

    @property
    def uses_tree(self) -> bool:
        return self in (ExtractionMode.QUADTREE_ALL, ExtractionMode.QUADTREE_LEAF)

    @property
    def label(self) -> str:
        return _MODE_LABELS[self]


_MODE_LABELS = {
    ExtractionMode.ALL_PATCHES: "All patches",
    ExtractionMode.TISSUE_MASK: "Segmented patches",
    ExtractionMode.QUADTREE_LEAF: "Leaf nodes",
    ExtractionMode.QUADTREE_ALL: "All nodes",
}


class Instance(NamedTuple):
    """One patch of a bag and where it came from.

    ``depth`` is the tree depth for quadtree instances and ``None`` for grid
    instances.
    """

    instance_id: str
    rect: Rect
    depth: int | None
    patch: np.ndarray | None = None


@dataclass
class Bag:
    image_id: str
    label: int
    instances: list[Instance]
    features: np.ndarray
    fold: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if not self.instances:
            raise EmptyBagError(self.image_id, "bag")
        if self.label not in (0, 1):
            raise LabelError(f"{self.image_id}: label must be 0 or 1, got {self.label!r}")
        if self.features.ndim != 2 or self.features.shape[0] != len(self.instances):
            raise DimMismatchError(
                f"{self.image_id}: features shape {self.features.shape} does not match "
                f"{len(self.instances)} instances"
            )

    def __len__(self):
        return len(self.instances)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


# ----------------------------------------------------------------------------
# extraction
# ----------------------------------------------------------------------------


def grid_rects(width: int, height: int, size: int = DEFAULT_PATCH_SIZE) -> list[tuple[str, Rect]]:
    """Non-overlapping ``size`` tiles; partial tiles at the right/bottom edge are dropped."""
    out = []
    for row in range(height // size):
        for col in range(width // size):
            out.append((f"g.{row}.{col}", Rect(col * size, row * size, size, size)))
    return out


def otsu_threshold(gray) -> int:
    """Otsu level on the 256-bin histogram of ``gray``.

    Pixels strictly below the returned level form the (dark) foreground. The
    between-class variance is compared in exact integer arithmetic so that
    plateaus of equal variance resolve to the lowest level.

    Raises:
        DegenerateError: the plane holds a single bin value.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.size == 0:
        raise DegenerateError("Otsu threshold of an empty plane")
    bins = np.clip(np.floor(gray), 0, 255).astype(np.intp).ravel()
    hist = np.bincount(bins, minlength=256)
    if np.count_nonzero(hist) < 2:
        raise DegenerateError("Otsu threshold of a constant plane")
    counts = [int(c) for c in hist]
    n_total = sum(counts)
    s_total = sum(i * c for i, c in enumerate(counts))
    best_level, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for level in range(1, 256):
        n0 += counts[level - 1]
        s0 += (level - 1) * counts[level - 1]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_b^2 * n_total^2 = (n_total*s0 - n0*s_total)^2 / (n0*n1)
        num = (n_total * s0 - n0 * s_total) ** 2
        den = n0 * n1
        if best_level is None or num * best_den > best_num * den:
            best_level, best_num, best_den = level, num, den
    return best_level


def tissue_mask(image, downsample: int = 8) -> np.ndarray:
    """Boolean mask of pixels darker than the Otsu level of the luminance plane.

    The level and the mask are computed on a thumbnail of ``downsample x
    downsample`` block means (edge-padded) and mapped back to full
    resolution, so dense dark nuclei are pooled with their surrounding tissue
    instead of being split off from it. A constant image has no tissue.
    """
    gray = to_luminance(as_image(image))
    h, w = gray.shape
    f = max(1, int(downsample))
    if f > 1:
        ph, pw = -h % f, -w % f
        padded = np.pad(gray, ((0, ph), (0, pw)), mode="edge")
        gray = padded.reshape(padded.shape[0] // f, f, padded.shape[1] // f, f).mean(axis=(1, 3))
    try:
        level = otsu_threshold(gray)
    except DegenerateError:
        return np.zeros((h, w), dtype=bool)
    mask = np.floor(gray) < level
    if f > 1:
        mask = np.repeat(np.repeat(mask, f, axis=0), f, axis=1)[:h, :w]
    return mask


def extract_instances(
    image,
    tree: Quadtree | None,
    mode,
    image_id: str = "",
    patch_size: int = DEFAULT_PATCH_SIZE,
    min_coverage: float = 0.5,
    with_patches: bool = True,
    mask_downsample: int = 8,
) -> list[Instance]:
    """Patches of one image under the given extraction mode.

    Quadtree modes take the patches stored in ``tree`` (or ``None`` if the tree
    was loaded without them); grid modes crop ``image``.
    """
    mode = ExtractionMode(mode)
    if mode.uses_tree:
        if tree is None:
            raise ValueError(f"mode {mode.value} requires a quadtree")
        nodes = tree.nodes() if mode is ExtractionMode.QUADTREE_ALL else tree.leaves()
        out = [Instance(n.node_id, n.rect, n.depth, n.patch if with_patches else None) for n in nodes]
    else:
        image = as_image(image)
        h, w, _ = image.shape
        cells = grid_rects(w, h, patch_size)
        if mode is ExtractionMode.TISSUE_MASK and cells:
            mask = tissue_mask(image, mask_downsample)
            cells = [(gid, r) for gid, r in cells if mask[r.slices()].mean() >= min_coverage]
        out = [
            Instance(gid, r, None, image[r.slices()].copy() if with_patches else None) for gid, r in cells
        ]
    if not out:
        raise EmptyBagError(image_id, mode.value)
    return out


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    brightness: float = 0.10
    contrast: float = 0.10
    saturation: float = 0.10
    hue: float = 0.05

    def __post_init__(self):
        for name in ("flip_prob", "brightness", "contrast", "saturation", "hue"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def off(cls) -> "AugmentationConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def _luma(x: np.ndarray) -> np.ndarray:
    return x @ np.array([0.299, 0.587, 0.114])


def jitter(patch, brightness: float = 1.0, contrast: float = 1.0, saturation: float = 1.0, hue: float = 0.0) -> np.ndarray:
    """Apply fixed colour adjustments in order brightness, contrast, saturation, hue.

    brightness ``x*b``; contrast ``m + c*(x - m)`` with ``m`` the mean
    luminance; saturation ``l + s*(x - l)`` with ``l`` the per-pixel luminance;
    hue rotation by ``hue`` turns in HSV. Values are clipped to [0, 255] after
    each step. Identity factors are skipped, so all-identity is bit-exact.
    """
    out = as_image(patch)
    if brightness == 1.0 and contrast == 1.0 and saturation == 1.0 and hue == 0.0:
        return out.copy()
    x = out.astype(np.float64)
    if brightness != 1.0:
        x = np.clip(x * brightness, 0.0, 255.0)
    if contrast != 1.0:
        m = _luma(x).mean()
        x = np.clip(m + contrast * (x - m), 0.0, 255.0)
    if saturation != 1.0:
        lum = _luma(x)[..., None]
        x = np.clip(lum + saturation * (x - lum), 0.0, 255.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(x / 255.0)
        hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
        x = np.clip(hsv_to_rgb(hsv) * 255.0, 0.0, 255.0)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def augment(patch, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal/vertical flips followed by :func:`jitter`.

    Exactly six uniforms are drawn per call whatever the config, so the rng
    stream does not depend on which operations are enabled.
    """
    u = rng.random(6)
    out = as_image(patch)
    if u[0] < config.flip_prob:
        out = out[:, ::-1]
    if u[1] < config.flip_prob:
        out = out[::-1, :]
    return jitter(
        np.ascontiguousarray(out),
        brightness=1.0 + config.brightness * (2.0 * u[2] - 1.0),
        contrast=1.0 + config.contrast * (2.0 * u[3] - 1.0),
        saturation=1.0 + config.saturation * (2.0 * u[4] - 1.0),
        hue=config.hue * (2.0 * u[5] - 1.0),
    )


def bag_seed(global_seed: int, image_id: str, epoch: int) -> int:
    """Per-bag rng seed, stable across processes and Python hash randomization."""
    digest = hashlib.sha256(f"{global_seed}\x00{image_id}\x00{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ----------------------------------------------------------------------------
# featurization
# ----------------------------------------------------------------------------


def builtin_features(patch) -> np.ndarray:
    """56-dim hand-crafted descriptor with every entry in [0, 1].

    Layout: 16-bin normalized histograms for R, G, B (48), channel means /255
    (3), channel standard deviations /127.5 (3), luminance entropy / 8 (1),
    mean luminance gradient magnitude / (255*sqrt 2) (1).
    """
    patch = as_image(patch)
    px = patch.reshape(-1, 3)
    n = px.shape[0]
    hists = [np.bincount(px[:, c] // (256 // HIST_BINS), minlength=HIST_BINS) / n for c in range(3)]
    x = px.astype(np.float64)
    means = x.mean(axis=0) / 255.0
    stds = np.minimum(x.std(axis=0) / 127.5, 1.0)
    lum = to_luminance(patch)
    ent = entropy(lum) / 8.0
    if lum.shape[0] > 1 and lum.shape[1] > 1:
        gx = np.diff(lum, axis=1)[:-1, :]
        gy = np.diff(lum, axis=0)[:, :-1]
        grad = float(np.mean(np.hypot(gx, gy))) / _GRAD_SCALE
    else:
        grad = 0.0
    return np.concatenate(hists + [means, stds, [ent, grad]])


class ExternalFeatures:
    """Feature lookup backed by a FeatureFile produced outside this package."""

    def __init__(self, feature_file: FeatureFile | str | Path):
        if not isinstance(feature_file, FeatureFile):
            feature_file = read_features(feature_file)
        self.feature_dim = feature_file.feature_dim
        self._index = feature_file.index()

    def __call__(self, image_id: str, node_id: str) -> np.ndarray:
        try:
            return self._index[(image_id, node_id)]
        except KeyError:
            raise MissingFeatureError(f"no external feature for ({image_id!r}, {node_id!r})") from None

    def features_for(self, image_id: str, instances: Sequence[Instance]) -> np.ndarray:
        return np.stack([self(image_id, inst.instance_id) for inst in instances])


def featurize_instances(instances: Sequence[Instance]) -> np.ndarray:
    return np.stack([builtin_features(inst.patch) for inst in instances])


# ----------------------------------------------------------------------------
# persistence: binary feature file + JSON sidecar
# ----------------------------------------------------------------------------


def save_bags(bags: Sequence[Bag], feature_path, sidecar_path, meta: Mapping | None = None) -> None:
    bags = list(bags)
    if not bags:
        raise ValueError("no bags to save")
    dim = bags[0].feature_dim
    records = [
        FeatureRecord(bag.image_id, inst.instance_id, bag.features[i])
        for bag in bags
        for i, inst in enumerate(bag.instances)
    ]
    write_features(records, feature_path, feature_dim=dim)
    doc = {
        "feature_file": Path(feature_path).name,
        "feature_dim": dim,
        "bags": [
            {
                "image_id": bag.image_id,
                "label": bag.label,
                "fold": bag.fold,
                "instances": [
                    {"id": inst.instance_id, "rect": list(inst.rect), "depth": inst.depth}
                    for inst in bag.instances
                ],
            }
            for bag in bags
        ],
    }
    if meta:
        doc.update(meta)
    write_json(sidecar_path, doc)


def load_bags(sidecar_path) -> tuple[list[Bag], dict]:
    """Read a bag sidecar and its feature file; returns ``(bags, sidecar_doc)``."""
    sidecar_path = Path(sidecar_path)
    doc = read_json(sidecar_path)
    try:
        ff = read_features(sidecar_path.parent / doc["feature_file"])
        index = ff.index()
        bags = []
        for b in doc["bags"]:
            instances = [Instance(i["id"], Rect(*i["rect"]), i["depth"]) for i in b["instances"]]
            feats = np.stack([index[(b["image_id"], inst.instance_id)] for inst in instances])
            bags.append(Bag(b["image_id"], int(b["label"]), instances, feats, int(b["fold"])))
    except KeyError as exc:
        raise SchemaError(f"{sidecar_path}: inconsistent bag sidecar ({exc})") from None
    return bags, doc
