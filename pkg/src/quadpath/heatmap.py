"""Attention heatmaps mapped back onto the source image.

Each instance of a quadtree bag covers a source rectangle. With ``overlap``
> 0 every node is re-evaluated on shifted windows of its own size (stride
``(1 - overlap) * size``, origins inside the node rectangle): the window is
resampled and featurized, substituted for the node's instance in the full
bag, and the resulting attention weight of that instance is accumulated over
the window's pixels. The per-pixel average is min-max normalized to [0, 255].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bags import ExtractionMode, builtin_features
from .errors import BackendMismatchError, DimError, UntrainedModelError
from .imageio import as_image
from .mil import attention_logits, forward_clam
from .quadtree import Quadtree, Rect, resample_patch

__all__ = [
    "HeatmapConfig",
    "COLORMAP",
    "attention_map",
    "render_overlay",
    "render_grid",
    "window_rects",
]


@dataclass(frozen=True)
class HeatmapConfig:
    overlap: float = 0.5
    alpha: float = 0.5
    branch: int | None = None  # CLAM branch; None = predicted class
    draw_grid: bool = False

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 0.9:
            raise ValueError(f"overlap must lie in [0, 0.9], got {self.overlap}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.branch not in (None, 0, 1):
            raise ValueError(f"branch must be 0, 1 or None, got {self.branch}")


def _diverging_table() -> np.ndarray:
    t = np.arange(256) / 255.0
    blue, white, red = np.array([0, 0, 255.0]), np.array([255.0, 255, 255]), np.array([255.0, 0, 0])
    lo = blue + (white - blue) * (t[:, None] / 0.5)
    hi = white + (red - white) * ((t[:, None] - 0.5) / 0.5)
    table = np.where(t[:, None] <= 0.5, lo, hi)
    return np.clip(np.rint(table), 0, 255).astype(np.uint8)


COLORMAP = _diverging_table()
COLORMAP.setflags(write=False)


def window_rects(rect: Rect, overlap: float, width: int, height: int) -> list[Rect]:
    """Evaluation windows for one node, clipped to the image."""
    sx = max(1, int(round((1.0 - overlap) * rect.w)))
    sy = max(1, int(round((1.0 - overlap) * rect.h)))
    out = []
    for y in range(rect.y, rect.y + rect.h, sy):
        for x in range(rect.x, rect.x + rect.w, sx):
            x1, y1 = min(x + rect.w, width), min(y + rect.h, height)
            if x1 > x and y1 > y:
                out.append(Rect(x, y, x1 - x, y1 - y))
    return out


def _softmax_at(logits: np.ndarray, k: int, new_logit: float) -> float:
    # weight of instance k after replacing its logit
    others = np.delete(logits, k)
    return float(1.0 / (1.0 + np.sum(np.exp(others - new_logit))))


def attention_map(
    image,
    tree: Quadtree,
    model,
    config: HeatmapConfig = HeatmapConfig(),
    featurize: Callable[[np.ndarray], np.ndarray] | None = builtin_features,
    features: np.ndarray | None = None,
    mode=ExtractionMode.QUADTREE_ALL,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel attention of ``model`` over the nodes of ``tree``.

    ``features`` (one row per node of ``mode``) overrides featurization of the
    stored node patches; it is how externally featurized bags are rendered.
    Shifted windows always need ``featurize``.

    Returns:
        ``(values, coverage)``: values in [0, 255] (0 where uncovered) and the
        per-pixel number of evaluations averaged into each value.

    Raises:
        UntrainedModelError: the model has never been trained.
        BackendMismatchError: ``overlap > 0`` without a featurizer, or
            ``features`` inconsistent with the tree.
    """
    if model.trained_epochs == 0:
        raise UntrainedModelError("heatmaps need a trained model")
    if config.overlap > 0 and featurize is None:
        raise BackendMismatchError("overlapping windows need an in-process featurizer")
    image = as_image(image)
    height, width, _ = image.shape
    mode = ExtractionMode(mode)
    nodes = tree.nodes() if mode is ExtractionMode.QUADTREE_ALL else tree.leaves()
    patch_size = tree.config.patch_size

    if features is None:
        if featurize is None:
            raise BackendMismatchError("no features and no featurizer")
        X = np.stack([
            featurize(n.patch if n.patch is not None else resample_patch(image[n.rect.slices()], patch_size))
            for n in nodes
        ])
    else:
        X = np.asarray(features, dtype=np.float64)
        if X.shape[0] != len(nodes):
            raise BackendMismatchError(f"{X.shape[0]} feature rows for {len(nodes)} nodes")
    if X.shape[1] != model.feature_dim:
        raise BackendMismatchError(f"feature dim {X.shape[1]} != model dim {model.feature_dim}")

    branch = config.branch
    if model.kind == "clam" and branch is None:
        branch = forward_clam(model, X).predicted
    logits = attention_logits(model, X, branch or 0)
    base = np.exp(logits - logits.max())
    base /= base.sum()

    acc = np.zeros((height, width), dtype=np.float64)
    cov = np.zeros((height, width), dtype=np.int64)
    for k, node in enumerate(nodes):
        if config.overlap == 0:
            windows = [(node.rect, base[k])]
        else:
            windows = []
            for r in window_rects(node.rect, config.overlap, width, height):
                if r == node.rect:
                    windows.append((r, base[k]))
                    continue
                f = featurize(resample_patch(image[r.slices()], patch_size))
                # logits are per-instance, so only the substituted one changes
                new_logit = attention_logits(model, f[None, :], branch or 0)[0]
                windows.append((r, _softmax_at(logits, k, new_logit)))
        for r, weight in windows:
            ys, xs = r.slices()
            acc[ys, xs] += weight
            cov[ys, xs] += 1

    covered = cov > 0
    values = np.zeros_like(acc)
    if covered.any():
        mean = acc[covered] / cov[covered]
        lo, hi = mean.min(), mean.max()
        # a spread at rounding level (e.g. uniform attention) counts as constant
        flat = hi - lo <= 1e-12 * max(abs(hi), abs(lo))
        values[covered] = 127.5 if flat else (mean - lo) / (hi - lo) * 255.0
    return np.clip(values, 0.0, 255.0), cov


def render_overlay(image, values, config: HeatmapConfig = HeatmapConfig(), coverage=None, tree: Quadtree | None = None) -> np.ndarray:
    """Blend the colour-mapped attention plane onto ``image``.

    Pixels with zero coverage keep their original colour. With
    ``config.draw_grid`` and a tree, leaf outlines are drawn on top.
    """
    image = as_image(image)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != image.shape[:2]:
        raise DimError(f"map shape {values.shape} != image shape {image.shape[:2]}")
    out = image.copy()
    if config.alpha > 0:
        covered = np.ones(values.shape, bool) if coverage is None else np.asarray(coverage) > 0
        colours = COLORMAP[np.clip(np.rint(values), 0, 255).astype(np.intp)].astype(np.float64)
        blend = (1.0 - config.alpha) * image.astype(np.float64) + config.alpha * colours
        out[covered] = np.clip(np.rint(blend[covered]), 0, 255).astype(np.uint8)
    if config.draw_grid and tree is not None:
        out = render_grid(out, tree)
    return out


def render_grid(image, tree: Quadtree, colour=(0, 0, 0)) -> np.ndarray:
    """Outline every leaf rectangle of ``tree`` on a copy of ``image``."""
    out = as_image(image).copy()
    for leaf in tree.leaves():
        x, y, w, h = leaf.rect
        out[y, x : x + w] = colour
        out[y + h - 1, x : x + w] = colour
        out[y : y + h, x] = colour
        out[y : y + h, x + w - 1] = colour
    return out
