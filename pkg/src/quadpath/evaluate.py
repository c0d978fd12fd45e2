"""Cross-validation, metrics and the extraction-mode comparison report."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bags import Bag, ExtractionMode
from .errors import EmptyFoldError, SingleClassError
from .mil import TrainConfig, init_model, predict_proba, train

__all__ = [
    "auroc",
    "accuracy",
    "mean_std",
    "FoldResult",
    "ModeSummary",
    "run_cv",
    "split_fold",
    "evaluate_fold",
    "summarize",
    "data_usage",
    "data_reduction",
    "report_csv",
    "timing_csv",
    "folds_csv",
    "report_table",
]


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (concordant pairs + ties / 2) / (n_pos * n_neg).

    Pair counts are integers, so the result is the correctly rounded value of
    the exact ratio.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    pos = scores[labels == 1]
    neg = np.sort(scores[labels == 0])
    if pos.size == 0 or neg.size == 0:
        raise SingleClassError("AUROC needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    concordant = int(below.sum())
    ties = int((upto - below).sum())
    return (2 * concordant + ties) / (2 * pos.size * neg.size)


def accuracy(scores, labels, cutoff: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean((scores >= cutoff).astype(int) == labels))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    vals = [float(v) for v in values]
    mu = math.fsum(vals) / len(vals)
    return mu, math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / len(vals))


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    auroc: float
    n_val: int
    train_seconds: float
    patch_counts: dict[str, int]
    scores: list[float] = field(default_factory=list, repr=False)
    labels: list[int] = field(default_factory=list, repr=False)


@dataclass
class ModeSummary:
    mode: str
    accuracy: tuple[float, float]
    auroc: tuple[float, float]
    train_seconds: float
    total_patches: int
    percent_data: float | None = None

    @property
    def label(self) -> str:
        try:
            return ExtractionMode(self.mode).label
        except ValueError:
            return self.mode


def run_cv(
    bags: Sequence[Bag],
    model_kind: str,
    train_config: TrainConfig,
    model_kwargs: Mapping | None = None,
    n_folds: int | None = None,
) -> list[FoldResult]:
    """Train on all folds but one, evaluate on the held-out fold, for every fold.

    The model for fold ``f`` is initialised with seed ``train_config.seed + f``.

    Raises:
        EmptyFoldError: fewer than two folds, or a fold without bags.
    """
    bags = list(bags)
    folds = sorted({b.fold for b in bags})
    if n_folds is None:
        n_folds = max(folds) + 1 if folds else 0
    if n_folds < 2:
        raise EmptyFoldError(f"cross-validation needs at least 2 folds, got {n_folds}")
    missing = sorted(set(range(n_folds)) - set(folds))
    if missing:
        raise EmptyFoldError(f"folds without bags: {missing}")
    model_kwargs = dict(model_kwargs or {})
    dim = bags[0].feature_dim

    results = []
    for f in range(n_folds):
        train_bags, val_bags = split_fold(bags, f)
        model = init_model(model_kind, dim, seed=train_config.seed + f, **model_kwargs)
        t0 = time.perf_counter()
        train(model, train_bags, train_config)
        results.append(evaluate_fold(f, model, train_bags, val_bags, time.perf_counter() - t0))
    return results


def split_fold(bags: Sequence[Bag], fold: int) -> tuple[list[Bag], list[Bag]]:
    """``(training bags, validation bags)`` for held-out ``fold``."""
    return [b for b in bags if b.fold != fold], [b for b in bags if b.fold == fold]


def evaluate_fold(fold: int, model, train_bags: Sequence[Bag], val_bags: Sequence[Bag], train_seconds: float = 0.0) -> FoldResult:
    """Score ``val_bags`` with a model trained on ``train_bags``.

    A validation fold holding a single class gets AUROC ``nan``.
    """
    scores = [predict_proba(model, b.features) for b in val_bags]
    labels = [b.label for b in val_bags]
    try:
        auc = auroc(scores, labels)
    except SingleClassError:
        auc = float("nan")
    return FoldResult(
        fold,
        accuracy(scores, labels),
        auc,
        len(val_bags),
        train_seconds,
        {"train": sum(len(b) for b in train_bags), "val": sum(len(b) for b in val_bags)},
        scores,
        labels,
    )


def summarize(mode: str, results: Sequence[FoldResult], total_patches: int) -> ModeSummary:
    return ModeSummary(
        mode,
        mean_std([r.accuracy for r in results]),
        mean_std([r.auroc for r in results]),
        math.fsum(r.train_seconds for r in results) / len(results),
        total_patches,
    )


def data_usage(patch_counts: Mapping[str, int], reference: str = ExtractionMode.ALL_PATCHES.value) -> dict[str, float]:
    """Percent of pixel data per mode relative to ``reference``.

    All patches have the same size, so the pixel ratio reduces to the patch
    count ratio.
    """
    ref = patch_counts[reference]
    return {mode: 100.0 * n / ref for mode, n in patch_counts.items()}


def data_reduction(count: int, baseline_count: int) -> float:
    """Percent fewer patches than the baseline, e.g. quadtree vs tissue mask."""
    return 100.0 - 100.0 * count / baseline_count


# ----------------------------------------------------------------------------
# report rendering
# ----------------------------------------------------------------------------

_MODE_ORDER = [m.value for m in (
    ExtractionMode.ALL_PATCHES,
    ExtractionMode.TISSUE_MASK,
    ExtractionMode.QUADTREE_LEAF,
    ExtractionMode.QUADTREE_ALL,
)]


def _ordered(summaries: Sequence[ModeSummary]) -> list[ModeSummary]:
    rank = {m: i for i, m in enumerate(_MODE_ORDER)}
    return sorted(summaries, key=lambda s: (rank.get(s.mode, len(rank)), s.mode))


def _pm(ms: tuple[float, float], scale: float = 1.0, digits: int = 2) -> str:
    return f"{ms[0] * scale:.{digits}f} ± {ms[1] * scale:.{digits}f}"


def _pct(s: ModeSummary) -> str:
    return "-" if s.percent_data is None else f"{s.percent_data:.2f}"


def report_csv(summaries: Sequence[ModeSummary]) -> str:
    """Deterministic comparison table (no wall-clock columns)."""
    lines = ["Method,Accuracy,Accuracy SD,AUROC,AUROC SD,Patches,% of pixel data"]
    for s in _ordered(summaries):
        lines.append(
            f"{s.label},{s.accuracy[0]:.6f},{s.accuracy[1]:.6f},{s.auroc[0]:.6f},{s.auroc[1]:.6f},"
            f"{s.total_patches},{_pct(s)}"
        )
    return "\n".join(lines) + "\n"


def timing_csv(summaries: Sequence[ModeSummary]) -> str:
    lines = ["Method,Average Training Time (s)"]
    lines += [f"{s.label},{s.train_seconds:.3f}" for s in _ordered(summaries)]
    return "\n".join(lines) + "\n"


def folds_csv(per_mode: Mapping[str, Sequence[FoldResult]]) -> str:
    lines = ["mode,fold,accuracy,auroc,n_val,train_patches,val_patches"]
    for mode in sorted(per_mode, key=lambda m: (_MODE_ORDER.index(m) if m in _MODE_ORDER else 99, m)):
        for r in per_mode[mode]:
            lines.append(
                f"{mode},{r.fold},{r.accuracy:.6f},{r.auroc:.6f},{r.n_val},"
                f"{r.patch_counts['train']},{r.patch_counts['val']}"
            )
    return "\n".join(lines) + "\n"


def report_table(summaries: Sequence[ModeSummary]) -> str:
    """Aligned text table comparing the extraction modes."""
    header = ["Method", "Accuracy", "AUROC", "Average Training Time (s)", "% of pixel data"]
    rows = [
        [s.label, _pm(s.accuracy, 100.0), _pm(s.auroc), f"{s.train_seconds:.1f}", _pct(s)]
        for s in _ordered(summaries)
    ]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows]) + "\n"
