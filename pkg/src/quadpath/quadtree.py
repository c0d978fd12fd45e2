"""Criterion-driven quadtree decomposition of RGB images.

A region becomes a node; it is split into four near-equal quadrants when its
criterion value exceeds the threshold and the depth cap has not been reached.
Every node keeps a fixed-size bilinear resample of its source region.

Node ids are path codes: ``"r"`` is the root and ``"r.2.1"`` is child 1 of
child 2 of the root, with children ordered top-left, top-right, bottom-left,
bottom-right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple

import numpy as np

from .colorspace import RUIFROK_HE, StainMatrix, to_plane
from .criterion import CriterionConfig, evaluate_plane
from .errors import SchemaError
from .imageio import as_image, load_image, read_json, save_image, write_json

__all__ = [
    "Rect",
    "QuadNode",
    "Quadtree",
    "QuadtreeConfig",
    "build_quadtree",
    "resample_patch",
    "split_rect",
    "node_path",
    "serialize_tree",
    "deserialize_tree",
    "check_tree",
    "max_node_count",
]

ROOT_ID = "r"
DEFAULT_PATCH_SIZE = 244
DEFAULT_MAX_DEPTH = 4


class Rect(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


@dataclass(frozen=True)
class QuadtreeConfig:
    criterion: CriterionConfig
    threshold: float
    max_depth: int = DEFAULT_MAX_DEPTH
    patch_size: int = DEFAULT_PATCH_SIZE
    stains: StainMatrix = RUIFROK_HE

    def __post_init__(self):
        if math.isnan(self.threshold):
            raise ValueError("threshold must not be NaN")
        if self.max_depth < 0:
            raise ValueError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion.to_dict(),
            "threshold": self.threshold,
            "max_depth": self.max_depth,
            "patch_size": self.patch_size,
            "stains": self.stains.to_values(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuadtreeConfig":
        return cls(
            CriterionConfig(**d["criterion"]),
            float(d["threshold"]),
            int(d["max_depth"]),
            int(d["patch_size"]),
            StainMatrix.from_values(d["stains"]),
        )


@dataclass(eq=False)
class QuadNode:
    node_id: str
    rect: Rect
    depth: int
    criterion_value: float
    children: list["QuadNode"] = field(default_factory=list)
    patch: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def iter_nodes(self) -> Iterator["QuadNode"]:
        """Pre-order, children in TL, TR, BL, BR order."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


@dataclass(eq=False)
class Quadtree:
    image_id: str
    config: QuadtreeConfig
    root: QuadNode

    def nodes(self) -> list[QuadNode]:
        return list(self.root.iter_nodes())

    def leaves(self) -> list[QuadNode]:
        return [n for n in self.root.iter_nodes() if n.is_leaf]

    def __len__(self) -> int:
        return sum(1 for _ in self.root.iter_nodes())

    def node_ids(self) -> set[str]:
        return {n.node_id for n in self.root.iter_nodes()}

    def find(self, node_id: str) -> QuadNode:
        node = self.root
        for idx in node_path(node_id):
            if node.is_leaf:
                raise KeyError(node_id)
            node = node.children[idx]
        return node

    def depth(self) -> int:
        return max(n.depth for n in self.root.iter_nodes())


def max_node_count(max_depth: int) -> int:
    return sum(4**j for j in range(max_depth + 1))


def node_path(node_id: str) -> list[int]:
    """Child indices from the root, e.g. ``"r.0.3"`` -> ``[0, 3]``."""
    parts = node_id.split(".")
    if parts[0] != ROOT_ID:
        raise SchemaError(f"node id {node_id!r} does not start at the root")
    try:
        path = [int(p) for p in parts[1:]]
    except ValueError:
        raise SchemaError(f"malformed node id {node_id!r}") from None
    if any(i not in range(4) for i in path):
        raise SchemaError(f"child index out of range in {node_id!r}")
    return path


def split_rect(rect: Rect) -> list[Rect]:
    # left/top quadrants take the ceiling for odd sizes
    wl, hl = (rect.w + 1) // 2, (rect.h + 1) // 2
    wr, hr = rect.w - wl, rect.h - hl
    x, y = rect.x, rect.y
    return [
        Rect(x, y, wl, hl),
        Rect(x + wl, y, wr, hl),
        Rect(x, y + hl, wl, hr),
        Rect(x + wl, y + hl, wr, hr),
    ]


def _axis_weights(n_in: int, n_out: int):
    # half-pixel-centre sampling positions, clamped at the borders
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def resample_patch(region, out_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Bilinear resample of an RGB region to ``out_size x out_size``.

    A region that already has the target size is returned as an exact copy.
    """
    region = as_image(region)
    h, w, _ = region.shape
    if h == out_size and w == out_size:
        return region.copy()
    y0, y1, fy = _axis_weights(h, out_size)
    x0, x1, fx = _axis_weights(w, out_size)
    src = region.astype(np.float64)
    rows = src[y0] * (1.0 - fy)[:, None, None] + src[y1] * fy[:, None, None]
    out = rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def build_quadtree(image, config: QuadtreeConfig, image_id: str = "", with_patches: bool = True) -> Quadtree:
    """Recursively decompose ``image``.

    The criterion of each node is computed on the colour-transformed source
    pixels of its own rectangle. Regions narrower or shorter than 2 pixels are
    kept as leaves even if their criterion exceeds the threshold.
    """
    image = as_image(image)
    plane = to_plane(image, config.criterion.space, config.stains)
    kind = config.criterion.kind
    t = config.threshold

    def visit(rect: Rect, depth: int, node_id: str) -> QuadNode:
        ys, xs = rect.slices()
        value = evaluate_plane(plane[ys, xs], kind)
        node = QuadNode(node_id, rect, depth, value)
        if with_patches:
            node.patch = resample_patch(image[ys, xs], config.patch_size)
        if value > t and depth < config.max_depth and rect.w >= 2 and rect.h >= 2:
            node.children = [
                visit(child, depth + 1, f"{node_id}.{i}") for i, child in enumerate(split_rect(rect))
            ]
        return node

    h, w, _ = image.shape
    root = visit(Rect(0, 0, w, h), 0, ROOT_ID)
    return Quadtree(image_id, config, root)


def check_tree(tree: Quadtree) -> None:
    """Assert the structural invariants of ``tree``; raises SchemaError on violation."""
    cfg = tree.config
    if len(tree) > max_node_count(cfg.max_depth):
        raise SchemaError("more nodes than a full tree of this depth")
    for node in tree.root.iter_nodes():
        if len(node.children) not in (0, 4):
            raise SchemaError(f"{node.node_id}: {len(node.children)} children")
        if node.is_leaf:
            degenerate = node.rect.w < 2 or node.rect.h < 2
            if not (node.criterion_value <= cfg.threshold or node.depth == cfg.max_depth or degenerate):
                raise SchemaError(f"{node.node_id}: leaf violates the split rule")
            continue
        if not (node.criterion_value > cfg.threshold and node.depth < cfg.max_depth):
            raise SchemaError(f"{node.node_id}: internal node violates the split rule")
        area = 0
        for i, child in enumerate(node.children):
            if child.depth != node.depth + 1 or child.node_id != f"{node.node_id}.{i}":
                raise SchemaError(f"{child.node_id}: bad depth or id under {node.node_id}")
            r = child.rect
            if r.x < node.rect.x or r.y < node.rect.y or r.x + r.w > node.rect.x + node.rect.w or r.y + r.h > node.rect.y + node.rect.h:
                raise SchemaError(f"{child.node_id}: rect outside parent")
            area += r.w * r.h
        if area != node.rect.w * node.rect.h:
            raise SchemaError(f"{node.node_id}: children do not tile the parent")
        for a in range(4):
            for b in range(a + 1, 4):
                ra, rb = node.children[a].rect, node.children[b].rect
                if ra.x < rb.x + rb.w and rb.x < ra.x + ra.w and ra.y < rb.y + rb.h and rb.y < ra.y + ra.h:
                    raise SchemaError(f"{node.node_id}: overlapping children {a}, {b}")


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------

TREE_FILE = "tree.json"
PATCH_DIR = "patches"


def serialize_tree(tree: Quadtree, tree_dir, provenance: Mapping | None = None, write_patches: bool = True) -> Path:
    """Write ``tree.json`` and one PNG per node under ``tree_dir/patches``."""
    tree_dir = Path(tree_dir)
    nodes = []
    for node in tree.root.iter_nodes():
        nodes.append(
            {
                "node_id": node.node_id,
                "rect": list(node.rect),
                "depth": node.depth,
                "criterion_value": node.criterion_value,
                "is_leaf": node.is_leaf,
            }
        )
        if write_patches:
            if node.patch is None:
                raise ValueError(f"{node.node_id}: tree was built without patches")
            save_image(node.patch, tree_dir / PATCH_DIR / f"{node.node_id}.png")
    doc = {"image_id": tree.image_id, "config": tree.config.to_dict(), "nodes": nodes}
    if provenance is not None:
        doc["provenance"] = dict(provenance)
    write_json(tree_dir / TREE_FILE, doc)
    return tree_dir / TREE_FILE


def deserialize_tree(tree_dir, load_patches: bool = False) -> Quadtree:
    tree_dir = Path(tree_dir)
    doc = read_json(tree_dir / TREE_FILE)
    try:
        config = QuadtreeConfig.from_dict(doc["config"])
        image_id = str(doc["image_id"])
        raw_nodes = list(doc["nodes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{tree_dir}: malformed tree header ({exc})") from None

    by_id: dict[str, QuadNode] = {}
    leaf_flags: dict[str, bool] = {}
    for rec in raw_nodes:
        try:
            nid = str(rec["node_id"])
            rect = Rect(*(int(v) for v in rec["rect"]))
            node = QuadNode(nid, rect, int(rec["depth"]), float(rec["criterion_value"]))
            leaf_flags[nid] = bool(rec["is_leaf"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{tree_dir}: malformed node record ({exc})") from None
        if nid in by_id:
            raise SchemaError(f"duplicate node id {nid!r}")
        if len(node_path(nid)) != node.depth:
            raise SchemaError(f"{nid}: depth {node.depth} inconsistent with id")
        by_id[nid] = node
    if ROOT_ID not in by_id:
        raise SchemaError(f"{tree_dir}: no root node")

    children: dict[str, dict[int, QuadNode]] = {}
    for nid, node in by_id.items():
        if nid == ROOT_ID:
            continue
        parent_id, idx = nid.rsplit(".", 1)
        if parent_id not in by_id:
            raise SchemaError(f"{nid}: parent {parent_id!r} missing")
        children.setdefault(parent_id, {})[int(idx)] = node
    for nid, node in by_id.items():
        kids = children.get(nid, {})
        if len(kids) not in (0, 4):
            raise SchemaError(f"{nid}: {len(kids)} children (expected 0 or 4)")
        node.children = [kids[i] for i in range(4)] if kids else []
        if node.is_leaf != leaf_flags[nid]:
            raise SchemaError(f"{nid}: is_leaf flag disagrees with topology")
        if load_patches:
            node.patch = load_image(tree_dir / PATCH_DIR / f"{nid}.png")
    return Quadtree(image_id, config, by_id[ROOT_ID])


def patch_path(tree_dir, node_id: str) -> Path:
    return Path(tree_dir) / PATCH_DIR / f"{node_id}.png"
