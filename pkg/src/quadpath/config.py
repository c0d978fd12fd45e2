"""Pipeline configuration: a TOML file plus command-line overrides.

Example::

    seed = 7

    [paths]
    manifest = "manifest.tsv"     # relative paths resolve against this file
    workdir = "work"

    [criterion]
    kind = "mean"                 # mean | entropy
    space = "haematoxylin"        # luminance | blue_ratio | haematoxylin
    k = -1.0

    [quadtree]
    max_depth = 4
    patch_size = 244

    [stains]
    matrix = [0.65, 0.70, 0.29, 0.07, 0.99, 0.11, 0.27, 0.57, 0.78]

    [bags]
    modes = ["quadtree_all", "quadtree_leaf", "all_patches", "tissue_mask"]
    backend = "builtin"           # builtin | external
    feature_file = ""             # QPFT file for the external backend
    min_coverage = 0.5
    mask_downsample = 8

    [augment]
    enabled = false
    flip_prob = 0.5

    [train]
    model = "clam"                # clam | amil
    epochs = 20

    [heatmap]
    overlap = 0.5
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .bags import AugmentationConfig, ExtractionMode
from .colorspace import RUIFROK_HE, StainMatrix
from .criterion import CriterionConfig
from .heatmap import HeatmapConfig
from .mil import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["TOOL_VERSION", "PipelineConfig", "load_config", "config_hash", "provenance"]

TOOL_VERSION = "0.1.0"
BACKENDS = ("builtin", "external")
MODEL_KINDS = ("clam", "amil")

_SECTIONS = {"paths", "criterion", "quadtree", "stains", "bags", "augment", "train", "heatmap"}


@dataclass
class PipelineConfig:
    manifest: Path | None = None
    workdir: Path = Path("work")
    seed: int = 0
    criterion: CriterionConfig = field(default_factory=CriterionConfig)
    max_depth: int = 4
    patch_size: int = 244
    stains: StainMatrix = RUIFROK_HE
    modes: tuple[ExtractionMode, ...] = tuple(ExtractionMode)
    backend: str = "builtin"
    feature_file: Path | None = None
    min_coverage: float = 0.5
    mask_downsample: int = 8
    augment_enabled: bool = False
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: str = "clam"
    train: TrainConfig = field(default_factory=TrainConfig)
    d_emb: int = 128
    attn_dim: int = 64
    heatmap: HeatmapConfig = field(default_factory=HeatmapConfig)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.max_depth < 0 or self.patch_size < 1:
            raise ValueError("max_depth must be >= 0 and patch_size >= 1")
        if not 0.0 < self.min_coverage <= 1.0:
            raise ValueError(f"min_coverage must lie in (0, 1], got {self.min_coverage}")
        if self.augment_enabled and self.backend != "builtin":
            raise ValueError("train-time augmentation needs the builtin featurizer")
        self.modes = tuple(ExtractionMode(m) for m in self.modes)
        self.train = dataclasses.replace(self.train, seed=self.seed)

    def hashed_fields(self) -> dict[str, Any]:
        """Everything that changes an artifact's content.

        Paths, the list of modes to run and heatmap rendering settings are
        left out: they select or locate artifacts without altering them.
        """
        return {
            "seed": self.seed,
            "criterion": self.criterion.to_dict(),
            "quadtree": {"max_depth": self.max_depth, "patch_size": self.patch_size},
            "stains": list(self.stains.to_values()),
            "bags": {
                "backend": self.backend,
                "feature_file": self.feature_file.name if self.feature_file else None,
                "min_coverage": self.min_coverage,
                "mask_downsample": self.mask_downsample,
            },
            "augment": dataclasses.asdict(self.augment) if self.augment_enabled else None,
            "train": {**self.train.to_dict(), "model": self.model, "d_emb": self.d_emb, "attn_dim": self.attn_dim},
        }

    def to_toml(self) -> str:
        """Render the config back to TOML (paths relative to ``workdir``'s parent are kept as given)."""
        def q(v):
            return json.dumps(str(v))

        lines = [f"seed = {self.seed}", "", "[paths]"]
        if self.manifest is not None:
            lines.append(f"manifest = {q(self.manifest)}")
        lines.append(f"workdir = {q(self.workdir)}")
        c = self.criterion
        lines += ["", "[criterion]", f"kind = {q(c.kind.value)}", f"space = {q(c.space.value)}", f"k = {float(c.k)!r}"]
        lines += ["", "[quadtree]", f"max_depth = {self.max_depth}", f"patch_size = {self.patch_size}"]
        lines += ["", "[stains]", "matrix = [" + ", ".join(repr(v) for v in self.stains.to_values()) + "]"]
        lines += [
            "",
            "[bags]",
            "modes = [" + ", ".join(q(m.value) for m in self.modes) + "]",
            f"backend = {q(self.backend)}",
            f"feature_file = {q(self.feature_file or '')}",
            f"min_coverage = {self.min_coverage!r}",
            f"mask_downsample = {self.mask_downsample}",
        ]
        a = self.augment
        lines += [
            "",
            "[augment]",
            f"enabled = {'true' if self.augment_enabled else 'false'}",
            *(f"{k} = {v!r}" for k, v in dataclasses.asdict(a).items()),
        ]
        t = self.train
        lines += [
            "",
            "[train]",
            f"model = {q(self.model)}",
            *(f"{k} = {v!r}" for k, v in t.to_dict().items() if k != "seed"),
            f"d_emb = {self.d_emb}",
            f"attn_dim = {self.attn_dim}",
        ]
        h = self.heatmap
        lines += [
            "",
            "[heatmap]",
            f"overlap = {h.overlap!r}",
            f"alpha = {h.alpha!r}",
            f"branch = {q('predicted' if h.branch is None else h.branch)}",
            f"draw_grid = {'true' if h.draw_grid else 'false'}",
        ]
        return "\n".join(lines) + "\n"


def config_hash(config: PipelineConfig) -> str:
    blob = json.dumps(config.hashed_fields(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def provenance(config: PipelineConfig) -> dict[str, Any]:
    return {"tool_version": TOOL_VERSION, "config_hash": config_hash(config), "seed": config.seed}


def _branch(value) -> int | None:
    if value in (None, "predicted", ""):
        return None
    return int(value)


def _path(value, base: Path) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _from_mapping(doc: Mapping[str, Any], base: Path) -> dict[str, Any]:
    unknown = set(doc) - _SECTIONS - {"seed"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kw: dict[str, Any] = {}
    if "seed" in doc:
        kw["seed"] = int(doc["seed"])
    paths = doc.get("paths", {})
    if "manifest" in paths:
        kw["manifest"] = _path(paths["manifest"], base)
    if "workdir" in paths:
        kw["workdir"] = _path(paths["workdir"], base)
    if "criterion" in doc:
        kw["criterion"] = CriterionConfig(**doc["criterion"])
    q = doc.get("quadtree", {})
    kw.update({k: int(q[k]) for k in ("max_depth", "patch_size") if k in q})
    if "matrix" in doc.get("stains", {}):
        kw["stains"] = StainMatrix.from_values(doc["stains"]["matrix"])
    b = dict(doc.get("bags", {}))
    if "modes" in b:
        kw["modes"] = tuple(b.pop("modes"))
    if "feature_file" in b:
        kw["feature_file"] = _path(b.pop("feature_file"), base)
    kw.update(b)
    a = dict(doc.get("augment", {}))
    if "enabled" in a:
        kw["augment_enabled"] = bool(a.pop("enabled"))
    if a:
        kw["augment"] = AugmentationConfig(**a)
    t = dict(doc.get("train", {}))
    for key in ("model", "d_emb", "attn_dim"):
        if key in t:
            kw[key] = t.pop(key)
    t.pop("seed", None)
    if t:
        kw["train"] = TrainConfig(**t)
    h = dict(doc.get("heatmap", {}))
    if "branch" in h:
        h["branch"] = _branch(h["branch"])
    if h:
        kw["heatmap"] = HeatmapConfig(**h)
    return kw


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Read ``path`` (optional) and apply ``overrides``; overrides win.

    Override keys are :class:`PipelineConfig` field names plus the shortcuts
    ``kind``, ``space``, ``k``, ``epochs``, ``lr``, ``overlap``, ``alpha``
    and ``branch``. ``None`` values are ignored.

    Raises:
        OSError: the file cannot be read.
        ValueError: malformed TOML or invalid values.
    """
    kw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from None
        try:
            kw = _from_mapping(doc, path.resolve().parent)
        except TypeError as exc:
            raise ValueError(f"{path}: {exc}") from None
    cfg = PipelineConfig(**kw)

    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    crit = {k: ov.pop(k) for k in ("kind", "space", "k") if k in ov}
    if crit:
        base = cfg.criterion.to_dict()
        base.update(crit)
        ov["criterion"] = CriterionConfig(**base)
    tr = {k: ov.pop(k) for k in ("epochs", "lr") if k in ov}
    if tr:
        ov["train"] = dataclasses.replace(cfg.train, **tr)
    hm = {k: ov.pop(k) for k in ("overlap", "alpha", "branch", "draw_grid") if k in ov}
    if hm:
        if "branch" in hm:
            hm["branch"] = _branch(hm["branch"])
        ov["heatmap"] = dataclasses.replace(cfg.heatmap, **hm)
    for key in ("manifest", "workdir", "feature_file"):
        if key in ov:
            ov[key] = Path(ov[key])
    return dataclasses.replace(cfg, **ov)
