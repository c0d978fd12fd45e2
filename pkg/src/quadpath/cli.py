"""Command-line front end: ``quadpath <command> [options]``.

Every command reads one pipeline config (``-c config.toml``) whose values
can be overridden by flags, and works inside the config's ``workdir``::

    stats.json                        criterion statistics and threshold
    stats_sweep/stats_k<k>.json       one file per k with --k-range
    trees/<image_id>/tree.json        decomposition (+ patches/<node_id>.png)
    instances/<mode>.json             instance provenance per image
    features/<mode>.qpft              feature vectors
    features/<mode>.bags.json         bag sidecar (labels, folds, provenance)
    models/<mode>/fold<f>.qpck        model trained with fold f held out
    models/<mode>/fold<f>_loss.csv    per-epoch mean loss
    models/<mode>/timing.json         wall-clock training time
    report.csv  report_timing.csv  folds.csv  report.txt  report.json
    heatmaps/<image_id>_heatmap.png  heatmaps/<image_id>_grid.png

Exit codes: 0 success, 2 usage error or missing input, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import criterion as crit
from .bags import (
    AugmentationConfig,
    Bag,
    ExternalFeatures,
    ExtractionMode,
    Instance,
    augment,
    bag_seed,
    builtin_features,
    extract_instances,
    load_bags,
    save_bags,
)
from .config import TOOL_VERSION, PipelineConfig, config_hash, load_config, provenance
from .errors import ConfigMismatchError, NumericalError, QuadpathError, SchemaError
from .evaluate import (
    FoldResult,
    data_reduction,
    evaluate_fold,
    folds_csv,
    report_csv,
    report_table,
    split_fold,
    summarize,
    timing_csv,
)
from .heatmap import attention_map, render_grid, render_overlay
from .imageio import (
    DatasetManifest,
    atomic_write,
    image_size,
    load_image,
    load_manifest,
    read_json,
    save_image,
    write_json,
)
from .mil import init_model, load_checkpoint, save_checkpoint, train
from .quadtree import QuadtreeConfig, Rect, build_quadtree, deserialize_tree, patch_path, serialize_tree
from .synth import generate_dataset

log = logging.getLogger("quadpath")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    """Bad invocation or missing input; maps to exit code 2."""


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def thread_count(flag: int | None) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("QUADPATH_THREADS"):
        try:
            n = int(os.environ["QUADPATH_THREADS"])
        except ValueError:
            raise UsageError(f"QUADPATH_THREADS must be an integer, got {os.environ['QUADPATH_THREADS']!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    """Order-preserving map, in worker processes when ``threads > 1``."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def parse_k_range(text: str) -> list[float]:
    """``"-2:2:0.25"`` -> [-2.0, -1.75, ..., 2.0] (end inclusive)."""
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--k-range expects start:stop:step, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise UsageError(f"--k-range needs step > 0 and stop >= start, got {text!r}")
    n = int(round((hi - lo) / step))
    if abs(lo + n * step - hi) > 1e-9 * max(1.0, abs(hi)):
        raise UsageError(f"--k-range: {hi} is not reachable from {lo} in steps of {step}")
    return [round(lo + i * step, 10) for i in range(n + 1)]


def require_manifest(cfg: PipelineConfig) -> DatasetManifest:
    if cfg.manifest is None:
        raise UsageError("no manifest given (set [paths].manifest or pass --manifest)")
    if not cfg.manifest.is_file():
        raise UsageError(f"manifest not found: {cfg.manifest}")
    return load_manifest(cfg.manifest)


def require_file(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise UsageError(f"missing {path} (run `quadpath {hint}` first)")
    return path


def check_provenance(doc: dict, cfg: PipelineConfig, what) -> None:
    found = (doc.get("provenance") or {}).get("config_hash")
    expected = config_hash(cfg)
    if found != expected:
        raise ConfigMismatchError(
            f"{what} was produced with config hash {found}, current config is {expected}; "
            "re-run the upstream commands"
        )


def tree_dir(cfg: PipelineConfig, image_id: str) -> Path:
    return cfg.workdir / "trees" / image_id


def features_paths(cfg: PipelineConfig, mode: ExtractionMode) -> tuple[Path, Path]:
    d = cfg.workdir / "features"
    return d / f"{mode.value}.qpft", d / f"{mode.value}.bags.json"


def model_path(cfg: PipelineConfig, mode: ExtractionMode, fold: int) -> Path:
    return cfg.workdir / "models" / mode.value / f"fold{fold}.qpck"


def quadtree_config(cfg: PipelineConfig, threshold: float) -> QuadtreeConfig:
    return QuadtreeConfig(cfg.criterion, threshold, cfg.max_depth, cfg.patch_size, cfg.stains)


def load_stats_checked(cfg: PipelineConfig, path: Path) -> crit.CriterionStats:
    doc = read_json(require_file(path, "stats"))
    check_provenance(doc, cfg, path)
    return crit.CriterionStats.from_dict(doc)


def instance_doc(inst: Instance) -> dict:
    return {"id": inst.instance_id, "rect": list(inst.rect), "depth": inst.depth}


# ----------------------------------------------------------------------------
# per-image workers (module level so they pickle)
# ----------------------------------------------------------------------------


def _decompose_one(args) -> tuple[str, int]:
    image_path, image_id, qcfg, out_dir, prov = args
    tree = build_quadtree(load_image(image_path), qcfg, image_id)
    out_dir = Path(out_dir)
    tmp = out_dir.with_name(f".{out_dir.name}.tmp")
    shutil.rmtree(tmp, ignore_errors=True)
    serialize_tree(tree, tmp, prov)
    old = out_dir.with_name(f".{out_dir.name}.old")
    shutil.rmtree(old, ignore_errors=True)
    if out_dir.exists():
        os.replace(out_dir, old)
    os.replace(tmp, out_dir)
    shutil.rmtree(old, ignore_errors=True)
    return image_id, len(tree)


def _extract_one(args) -> list[dict]:
    image_path, image_id, mode, tdir, patch_size, min_cov, downsample = args
    mode = ExtractionMode(mode)
    if mode.uses_tree:
        tree = deserialize_tree(tdir)
        insts = extract_instances(None, tree, mode, image_id, patch_size, with_patches=False)
    else:
        insts = extract_instances(
            load_image(image_path), None, mode, image_id, patch_size, min_cov, False, downsample
        )
    return [instance_doc(i) for i in insts]


def _instance_patches(image_path, mode: ExtractionMode, tdir, instances: Sequence[Instance]) -> list[np.ndarray]:
    if mode.uses_tree:
        return [load_image(patch_path(tdir, inst.instance_id)) for inst in instances]
    image = load_image(image_path)
    return [image[inst.rect.slices()].copy() for inst in instances]


def _featurize_one(args) -> np.ndarray:
    image_path, mode, tdir, instances = args
    patches = _instance_patches(image_path, ExtractionMode(mode), tdir, instances)
    return np.stack([builtin_features(p) for p in patches])


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    meta = generate_dataset(args.n, args.seed, out, size=args.size)
    cfg = PipelineConfig(
        manifest=Path("manifest.tsv"), workdir=Path("work"), seed=args.seed, patch_size=args.patch_size
    )
    atomic_write(out / "pipeline.toml", cfg.to_toml())
    pos = [m["informative_fraction"] for m in meta if m["label"] == 1]
    print(f"wrote {len(meta)} images to {out} (positive informative fraction {min(pos):.3f}-{max(pos):.3f})")
    print(f"config: {out / 'pipeline.toml'}")
    return 0


def cmd_stats(args, cfg: PipelineConfig) -> int:
    manifest = require_manifest(cfg)
    if args.threads_n > 1 and len(manifest) > 1:
        with ProcessPoolExecutor(max_workers=min(args.threads_n, len(manifest))) as pool:
            values = crit.criterion_values(manifest, cfg.criterion, cfg.stains, pool)
    else:
        values = crit.criterion_values(manifest, cfg.criterion, cfg.stains)
    if args.k_range:
        out_dir = cfg.workdir / "stats_sweep"
        for k in parse_k_range(args.k_range):
            kcfg = dataclasses.replace(cfg, criterion=dataclasses.replace(cfg.criterion, k=k))
            stats = crit.stats_from_values(values, kcfg.criterion)
            path = out_dir / f"stats_k{k:+.2f}.json"
            crit.save_stats(stats, path, provenance(kcfg))
            print(f"k={k:+.2f}  t={stats.threshold:.6f}  -> {path}")
        return 0
    stats = crit.stats_from_values(values, cfg.criterion)
    path = Path(args.out) if args.out else cfg.workdir / "stats.json"
    crit.save_stats(stats, path, provenance(cfg))
    print(f"mu={stats.mu:.6f} sigma={stats.sigma:.6f} k={stats.k:g} t={stats.threshold:.6f} -> {path}")
    return 0


def cmd_decompose(args, cfg: PipelineConfig) -> int:
    manifest = require_manifest(cfg)
    stats = load_stats_checked(cfg, Path(args.stats) if args.stats else cfg.workdir / "stats.json")
    qcfg = quadtree_config(cfg, stats.threshold)
    prov = provenance(cfg)
    jobs = [
        (str(manifest.resolve(e)), e.image_id, qcfg, str(tree_dir(cfg, e.image_id)), prov) for e in manifest
    ]
    (cfg.workdir / "trees").mkdir(parents=True, exist_ok=True)
    counts = parallel_map(_decompose_one, jobs, args.threads_n)
    total = sum(n for _, n in counts)
    print(f"decomposed {len(counts)} images at t={stats.threshold:.6f}: {total} nodes")
    return 0


def cmd_extract(args, cfg: PipelineConfig) -> int:
    manifest = require_manifest(cfg)
    prov = provenance(cfg)
    for mode in cfg.modes:
        if mode.uses_tree:
            for e in manifest:
                tf = tree_dir(cfg, e.image_id) / "tree.json"
                check_provenance(read_json(require_file(tf, "decompose")), cfg, tf)
        jobs = [
            (
                str(manifest.resolve(e)),
                e.image_id,
                mode.value,
                str(tree_dir(cfg, e.image_id)),
                cfg.patch_size,
                cfg.min_coverage,
                cfg.mask_downsample,
            )
            for e in manifest
        ]
        per_image = parallel_map(_extract_one, jobs, args.threads_n)
        doc = {
            "provenance": prov,
            "mode": mode.value,
            "patch_size": cfg.patch_size,
            "images": [
                {"image_id": e.image_id, "label": e.label, "fold": e.fold, "instances": insts}
                for e, insts in zip(manifest, per_image)
            ],
        }
        path = cfg.workdir / "instances" / f"{mode.value}.json"
        write_json(path, doc)
        print(f"{mode.value}: {sum(len(i) for i in per_image)} patches from {len(per_image)} images -> {path}")
    return 0


def _load_instances(cfg: PipelineConfig, mode: ExtractionMode) -> dict:
    path = require_file(cfg.workdir / "instances" / f"{mode.value}.json", "extract")
    doc = read_json(path)
    check_provenance(doc, cfg, path)
    return doc


def _doc_instances(rec: dict) -> list[Instance]:
    try:
        return [Instance(i["id"], Rect(*i["rect"]), i["depth"]) for i in rec["instances"]]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed instance record for {rec.get('image_id')!r} ({exc})") from None


def cmd_featurize(args, cfg: PipelineConfig) -> int:
    manifest = require_manifest(cfg)
    by_id = manifest.by_id()
    prov = provenance(cfg)
    external = None
    if cfg.backend == "external":
        if cfg.feature_file is None or not cfg.feature_file.is_file():
            raise UsageError(f"external backend needs an existing feature_file, got {cfg.feature_file}")
        external = ExternalFeatures(cfg.feature_file)
    for mode in cfg.modes:
        doc = _load_instances(cfg, mode)
        records = doc["images"]
        instances = [_doc_instances(r) for r in records]
        if external is not None:
            feats = [external.features_for(r["image_id"], insts) for r, insts in zip(records, instances)]
        else:
            jobs = [
                (str(manifest.resolve(by_id[r["image_id"]])), mode.value, str(tree_dir(cfg, r["image_id"])), insts)
                for r, insts in zip(records, instances)
            ]
            feats = parallel_map(_featurize_one, jobs, args.threads_n)
        bags = [
            Bag(r["image_id"], int(r["label"]), tuple(insts), f, int(r["fold"]))
            for r, insts, f in zip(records, instances, feats)
        ]
        fpath, spath = features_paths(cfg, mode)
        save_bags(bags, fpath, spath, {"provenance": prov, "mode": mode.value, "backend": cfg.backend})
        print(f"{mode.value}: {len(bags)} bags, dim {bags[0].feature_dim} -> {fpath}")
    return 0


def _load_bags_checked(cfg: PipelineConfig, mode: ExtractionMode) -> list[Bag]:
    _, spath = features_paths(cfg, mode)
    bags, doc = load_bags(require_file(spath, "featurize"))
    check_provenance(doc, cfg, spath)
    return bags


def _augmenting_featurizer(cfg: PipelineConfig, manifest: DatasetManifest, mode: ExtractionMode):
    by_id = manifest.by_id()
    aug: AugmentationConfig = cfg.augment

    def features(bag: Bag, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(bag_seed(cfg.seed, bag.image_id, epoch))
        patches = _instance_patches(
            manifest.resolve(by_id[bag.image_id]), mode, tree_dir(cfg, bag.image_id), bag.instances
        )
        return np.stack([builtin_features(augment(p, aug, rng)) for p in patches])

    return features


def _n_folds(bags: Iterable[Bag]) -> int:
    return max(b.fold for b in bags) + 1


def cmd_train(args, cfg: PipelineConfig) -> int:
    manifest = require_manifest(cfg) if cfg.augment_enabled else None
    prov = provenance(cfg)
    for mode in cfg.modes:
        bags = _load_bags_checked(cfg, mode)
        n_folds = _n_folds(bags)
        if n_folds < 2:
            raise QuadpathError(f"{mode.value}: cross-validation needs at least 2 folds")
        featurizer = _augmenting_featurizer(cfg, manifest, mode) if cfg.augment_enabled else None
        timing = {}
        for f in range(n_folds):
            train_bags, _ = split_fold(bags, f)
            if not train_bags:
                raise QuadpathError(f"{mode.value}: no training bags with fold {f} held out")
            model = init_model(
                cfg.model, bags[0].feature_dim, seed=cfg.seed + f, d_emb=cfg.d_emb, attn_dim=cfg.attn_dim
            )
            t0 = time.perf_counter()
            result = train(model, train_bags, cfg.train, featurizer)
            timing[str(f)] = time.perf_counter() - t0
            path = model_path(cfg, mode, f)
            save_checkpoint(model, path, {"provenance": prov, "mode": mode.value, "fold": f})
            atomic_write(path.with_name(f"fold{f}_loss.csv"), result.loss_csv())
            print(f"{mode.value} fold {f}: final loss {result.losses[-1] if result.losses else float('nan'):.4f}")
        write_json(cfg.workdir / "models" / mode.value / "timing.json", {"train_seconds": timing})
    return 0


def _load_model_checked(cfg: PipelineConfig, mode: ExtractionMode, fold: int):
    path = require_file(model_path(cfg, mode, fold), "train")
    model, meta = load_checkpoint(path)
    check_provenance(meta, cfg, path)
    return model


def all_patches_count(cfg: PipelineConfig, manifest: DatasetManifest) -> int:
    total = 0
    for e in manifest:
        w, h = image_size(manifest.resolve(e))
        total += (w // cfg.patch_size) * (h // cfg.patch_size)
    return total


def cmd_eval(args, cfg: PipelineConfig) -> int:
    manifest = require_manifest(cfg)
    reference = all_patches_count(cfg, manifest)
    summaries, per_mode, counts = [], {}, {}
    for mode in cfg.modes:
        bags = _load_bags_checked(cfg, mode)
        timing_path = cfg.workdir / "models" / mode.value / "timing.json"
        timing = read_json(timing_path)["train_seconds"] if timing_path.is_file() else {}
        results: list[FoldResult] = []
        for f in range(_n_folds(bags)):
            train_bags, val_bags = split_fold(bags, f)
            model = _load_model_checked(cfg, mode, f)
            results.append(evaluate_fold(f, model, train_bags, val_bags, float(timing.get(str(f), 0.0))))
        total = sum(len(b) for b in bags)
        s = summarize(mode.value, results, total)
        s.percent_data = 100.0 * total / reference if reference else None
        summaries.append(s)
        per_mode[mode.value] = results
        counts[mode.value] = total

    atomic_write(cfg.workdir / "report.csv", report_csv(summaries))
    atomic_write(cfg.workdir / "report_timing.csv", timing_csv(summaries))
    atomic_write(cfg.workdir / "folds.csv", folds_csv(per_mode))
    table = report_table(summaries)
    extra = {}
    qa, tm = ExtractionMode.QUADTREE_ALL.value, ExtractionMode.TISSUE_MASK.value
    if qa in counts and tm in counts:
        extra["quadtree_vs_tissue_reduction_percent"] = data_reduction(counts[qa], counts[tm])
        table += f"\nAll nodes use {extra['quadtree_vs_tissue_reduction_percent']:.2f}% fewer patches than Segmented patches\n"
    atomic_write(cfg.workdir / "report.txt", table)
    write_json(
        cfg.workdir / "report.json",
        {
            "provenance": provenance(cfg),
            "all_patches_reference": reference,
            "patch_counts": counts,
            **extra,
            "modes": {
                s.mode: {
                    "accuracy_mean": s.accuracy[0],
                    "accuracy_sd": s.accuracy[1],
                    "auroc_mean": s.auroc[0],
                    "auroc_sd": s.auroc[1],
                    "patches": s.total_patches,
                    "percent_data": s.percent_data,
                }
                for s in summaries
            },
        },
    )
    print(table, end="")
    return 0


def cmd_heatmap(args, cfg: PipelineConfig) -> int:
    manifest = require_manifest(cfg)
    by_id = manifest.by_id()
    mode = ExtractionMode(args.heatmap_mode)
    if not mode.uses_tree:
        raise UsageError("heatmaps are drawn over quadtree modes (quadtree_all or quadtree_leaf)")
    ids = args.image_id or [e.image_id for e in manifest]
    out_dir = Path(args.out) if args.out else cfg.workdir / "heatmaps"
    bags = {b.image_id: b for b in _load_bags_checked(cfg, mode)} if cfg.backend == "external" else {}
    for image_id in ids:
        if image_id not in by_id:
            raise UsageError(f"unknown image id {image_id!r}")
        entry = by_id[image_id]
        tdir = tree_dir(cfg, image_id)
        tf = require_file(tdir / "tree.json", "decompose")
        check_provenance(read_json(tf), cfg, tf)
        tree = deserialize_tree(tdir, load_patches=True)
        image = load_image(manifest.resolve(entry))
        model = _load_model_checked(cfg, mode, entry.fold)
        if cfg.backend == "external":
            values, cov = attention_map(image, tree, model, cfg.heatmap, None, bags[image_id].features, mode)
        else:
            values, cov = attention_map(image, tree, model, cfg.heatmap, builtin_features, None, mode)
        save_image(render_overlay(image, values, cfg.heatmap, cov, tree), out_dir / f"{image_id}_heatmap.png")
        save_image(render_grid(image, tree), out_dir / f"{image_id}_grid.png")
        print(f"{image_id}: {out_dir / (image_id + '_heatmap.png')}")
    return 0


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

_MODE_CHOICES = [m.value for m in ExtractionMode]


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("config")
    g.add_argument("-c", "--config", help="pipeline TOML file")
    g.add_argument("--manifest")
    g.add_argument("--workdir")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="worker processes (default: $QUADPATH_THREADS or all cores)")
    g.add_argument("--kind", choices=["entropy", "mean"], help="criterion")
    g.add_argument("--space", choices=["luminance", "blue_ratio", "haematoxylin"])
    g.add_argument("--k", type=float, help="threshold multiplier: t = mu + k*sigma")
    g.add_argument("--max-depth", type=int)
    g.add_argument("--patch-size", type=int)
    g.add_argument("--mode", action="append", choices=_MODE_CHOICES, help="repeatable; default: config list")
    g.add_argument("--backend", choices=["builtin", "external"])
    g.add_argument("--feature-file")
    g.add_argument("--model", choices=["clam", "amil"])
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--overlap", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--branch", choices=["0", "1", "predicted"])
    g.add_argument("--grid", action=argparse.BooleanOptionalAction, default=None, help="outline leaves on the overlay")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="quadpath", description="Quadtree patch bags for attention MIL.")
    parser.add_argument("--version", action="version", version=f"quadpath {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--n", type=int, default=60)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=1024)
    s.add_argument("--patch-size", type=int, default=64, help="patch size written into pipeline.toml")

    s = sub.add_parser("stats", parents=[common], help="criterion statistics and threshold")
    s.add_argument("--k-range", help="sweep start:stop:step, e.g. -2:2:0.25")
    s.add_argument("--out", help="stats file (default: <workdir>/stats.json)")

    s = sub.add_parser("decompose", parents=[common], help="build one quadtree per image")
    s.add_argument("--stats", help="stats file (default: <workdir>/stats.json)")

    sub.add_parser("extract", parents=[common], help="list instances per extraction mode")
    sub.add_parser("featurize", parents=[common], help="compute or import instance features")
    sub.add_parser("train", parents=[common], help="train one model per held-out fold")
    sub.add_parser("eval", parents=[common], help="cross-validated comparison report")

    s = sub.add_parser("heatmap", parents=[common], help="attention heatmaps over the decomposition")
    s.add_argument("--image-id", action="append", help="repeatable; default: every image")
    s.add_argument("--heatmap-mode", default=ExtractionMode.QUADTREE_ALL.value, choices=_MODE_CHOICES[:2])
    s.add_argument("--out", help="output directory (default: <workdir>/heatmaps)")
    return parser


def overrides(args) -> dict:
    return {
        "manifest": args.manifest,
        "workdir": args.workdir,
        "seed": args.seed,
        "kind": args.kind,
        "space": args.space,
        "k": args.k,
        "max_depth": args.max_depth,
        "patch_size": args.patch_size,
        "modes": tuple(dict.fromkeys(args.mode)) if args.mode else None,
        "backend": args.backend,
        "feature_file": args.feature_file,
        "model": args.model,
        "epochs": args.epochs,
        "lr": args.lr,
        "augment_enabled": args.augment,
        "overlap": args.overlap,
        "alpha": args.alpha,
        "branch": args.branch,
        "draw_grid": args.grid,
    }


_COMMANDS = {
    "stats": cmd_stats,
    "decompose": cmd_decompose,
    "extract": cmd_extract,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
}


def _glue_negative_values(argv: list[str]) -> list[str]:
    # argparse reads "-2:2:0.25" as an option; bind it to its flag explicitly
    out, i = [], 0
    while i < len(argv):
        if argv[i] in ("--k-range", "--k") and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(_glue_negative_values(argv))
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            if args.n < 6 or args.n % 2:
                raise UsageError(f"--n must be even and >= 6, got {args.n}")
            return cmd_synth(args)
        if args.config is not None and not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg = load_config(args.config, overrides(args))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
        args.threads_n = thread_count(args.threads)
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"quadpath: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"quadpath: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (QuadpathError, OSError) as exc:
        print(f"quadpath: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
