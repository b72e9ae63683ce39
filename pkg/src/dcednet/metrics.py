"""Pixel-level segmentation metrics and the results table.

Masks follow the unity-mask convention: 0 marks cell (ROI) pixels, 1 marks
background. ROI is the positive class everywhere, so ``tp`` counts pixels
that both prediction and truth label 0. Probability maps are binarized at
0.5 before any metric is computed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

ROI, BACKGROUND = 0, 1

TABLE_ROWS = (
    ("training_accuracy", "Training Accuracy"),
    ("training_loss", "Training Loss"),
    ("validation_accuracy", "Validation Accuracy"),
    ("validation_loss", "Validation Loss"),
    ("test_accuracy", "Test Accuracy"),
    ("test_loss", "Test Loss"),
    ("bfscore", "BFScore"),
    ("iou", "IoU"),
)
EXTRA_ROWS = (
    ("mean_accuracy", "Mean Class Accuracy"),
    ("mean_iou", "Mean IoU"),
    ("weighted_iou", "Weighted IoU"),
)
TAG_ORDER = ("healthy", "anaemic")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def binarize(prob: np.ndarray) -> np.ndarray:
    return (np.asarray(prob) >= 0.5).astype(np.uint8)


def _check_binary(*masks):
    for m in masks:
        m = np.asarray(m)
        if m.size and not np.isin(m, (0, 1)).all():
            raise ValueError("masks must contain only 0 (ROI) and 1 (background)")


def _pair(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    _check_binary(pred, truth)
    return pred == ROI, truth == ROI


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _pair(pred, truth)
    return ConfusionCounts(tp=int(np.count_nonzero(p & t)), tn=int(np.count_nonzero(~p & ~t)),
                           fp=int(np.count_nonzero(p & ~t)), fn=int(np.count_nonzero(~p & t)))


def pixel_accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty comparison is undefined")
    return (c.tp + c.tn) / c.total


def class_accuracy(c: ConfusionCounts, cls: int) -> float:
    """Recall of one class; 1.0 when the class is absent from the truth."""
    hit, miss = (c.tp, c.fn) if cls == ROI else (c.tn, c.fp)
    return 1.0 if hit + miss == 0 else hit / (hit + miss)


def mean_accuracy(c: ConfusionCounts) -> float:
    return 0.5 * (class_accuracy(c, ROI) + class_accuracy(c, BACKGROUND))


def iou_from_counts(c: ConfusionCounts, cls: int = ROI) -> float:
    inter = c.tp if cls == ROI else c.tn
    union = c.tp + c.fp + c.fn if cls == ROI else c.tn + c.fp + c.fn
    return 1.0 if union == 0 else inter / union


def mean_iou_from_counts(c: ConfusionCounts) -> float:
    return 0.5 * (iou_from_counts(c, ROI) + iou_from_counts(c, BACKGROUND))


def weighted_iou_from_counts(c: ConfusionCounts) -> float:
    if c.total == 0:
        return 1.0
    roi_freq = (c.tp + c.fn) / c.total
    return roi_freq * iou_from_counts(c, ROI) + (1 - roi_freq) * iou_from_counts(c, BACKGROUND)


def iou(pred, truth, cls: int = ROI) -> float:
    return iou_from_counts(confusion(pred, truth), cls)


def mean_iou(pred, truth) -> float:
    return mean_iou_from_counts(confusion(pred, truth))


def weighted_iou(pred, truth) -> float:
    return weighted_iou_from_counts(confusion(pred, truth))


def boundary_extract(mask) -> np.ndarray:
    """ROI pixels with a 4-neighbour that is background or off the image."""
    mask = np.asarray(mask)
    _check_binary(mask)
    roi = np.pad(mask == ROI, 1, constant_values=False)
    interior = roi[:-2, 1:-1] & roi[2:, 1:-1] & roi[1:-1, :-2] & roi[1:-1, 2:]
    return roi[1:-1, 1:-1] & ~interior


def default_theta(shape) -> int:
    """Boundary tolerance: 0.75% of the image diagonal, rounded up."""
    return max(1, math.ceil(0.0075 * math.hypot(shape[0], shape[1])))


def bfscore(pred, truth, theta: float | None = None) -> float:
    """Boundary F1 score with a Euclidean matching tolerance of ``theta`` pixels."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _pair(pred, truth)
    if theta is None:
        theta = default_theta(truth.shape)
    if theta < 1:
        raise ValueError(f"theta must be >= 1, got {theta}")
    bp, bt = boundary_extract(pred), boundary_extract(truth)
    n_p, n_t = np.count_nonzero(bp), np.count_nonzero(bt)
    if n_p == 0 and n_t == 0:
        return 1.0
    if n_p == 0 or n_t == 0:
        return 0.0
    dist_to_truth = ndimage.distance_transform_edt(~bt)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    precision = np.count_nonzero(dist_to_truth[bp] <= theta) / n_p
    recall = np.count_nonzero(dist_to_pred[bt] <= theta) / n_t
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pixel_count(masks, tags) -> dict[str, dict[str, int]]:
    """ROI/background pixel totals per dataset tag plus a ``global`` entry."""
    out: dict[str, dict[str, int]] = {}
    total = {"roi": 0, "background": 0}
    for mask, tag in zip(masks, tags):
        mask = np.asarray(mask)
        _check_binary(mask)
        roi = int(np.count_nonzero(mask == ROI))
        bg = int(mask.size - roi)
        entry = out.setdefault(tag, {"roi": 0, "background": 0})
        entry["roi"] += roi
        entry["background"] += bg
        total["roi"] += roi
        total["background"] += bg
    out["global"] = total
    return out


def format_count(value: float) -> str:
    return f"{value:.4e}"


# -- report -------------------------------------------------------------------

@dataclass
class ImageEval:
    """Per-image evaluation record."""
    tag: str
    counts: ConfusionCounts
    loss: float
    bf: float
    roi_pixels: int = 0
    pixels: int = 0


def evaluate_image(prob, truth, tag: str = "unknown", theta: float | None = None) -> ImageEval:
    """Score one probability map (or binary prediction) against its mask."""
    prob = np.asarray(prob, dtype=np.float64).squeeze()
    truth = np.asarray(truth).squeeze()
    pred = binarize(prob)
    loss = float(np.mean((truth.astype(np.float64) - prob) ** 2))
    return ImageEval(tag, confusion(pred, truth), loss, bfscore(pred, truth, theta),
                     int(np.count_nonzero(pred == ROI)), int(pred.size))


def summarize(records: list[ImageEval]) -> dict[str, float]:
    """Pooled-count accuracy/IoU, mean loss and mean BF score of a split."""
    if not records:
        raise ValueError("cannot summarize an empty split")
    c = ConfusionCounts()
    for r in records:
        c = c + r.counts
    return {
        "accuracy": pixel_accuracy(c),
        "loss": float(np.mean([r.loss for r in records])),
        "bfscore": float(np.mean([r.bf for r in records])),
        "iou": iou_from_counts(c, ROI),
        "mean_iou": mean_iou_from_counts(c),
        "weighted_iou": weighted_iou_from_counts(c),
        "mean_accuracy": mean_accuracy(c),
    }


@dataclass
class FoldResult:
    """Per-split evaluation records of one training run."""
    train: list[ImageEval] = field(default_factory=list)
    validation: list[ImageEval] = field(default_factory=list)
    test: list[ImageEval] = field(default_factory=list)


@dataclass
class MetricsReport:
    columns: dict[str, dict[str, float | None]]
    pixel_counts: dict[str, dict[str, int]]
    folds: list["MetricsReport"] = field(default_factory=list)

    def value(self, row: str, column: str = "global") -> float | None:
        return self.columns[column][row]

    def to_dict(self) -> dict:
        out = {"columns": self.columns, "pixel_counts": self.pixel_counts}
        if self.folds:
            out["folds"] = [f.to_dict() for f in self.folds]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        if self.folds:
            for i, fold in enumerate(self.folds):
                lines.append(f"== fold {i + 1} ==")
                lines.append(fold._table())
            lines.append(f"== mean over {len(self.folds)} folds ==")
        lines.append(self._table())
        return "\n".join(lines) + "\n"

    def _table(self) -> str:
        cols = list(self.columns)
        rows = [f"{'#':<3}{'Metric':<22}" + "".join(f"{c:>14}" for c in cols)]
        for i, (key, label) in enumerate(TABLE_ROWS + EXTRA_ROWS, 1):
            vals = [self.columns[c].get(key) for c in cols]
            rows.append(f"{i:<3}{label:<22}" +
                        "".join(f"{'n/a' if v is None else f'{v:.4f}':>14}" for v in vals))
        rows.append("")
        rows.append("Pixel count (predicted ROI / background)")
        for tag, entry in self.pixel_counts.items():
            rows.append(f"  {tag:<22}{format_count(entry['roi']):>14}"
                        f"{format_count(entry['background']):>14}")
        return "\n".join(rows)


def _column(split_records: dict[str, list[ImageEval]]) -> dict[str, float | None]:
    col: dict[str, float | None] = {k: None for k, _ in TABLE_ROWS + EXTRA_ROWS}
    for split, prefix in (("train", "training"), ("validation", "validation"), ("test", "test")):
        recs = split_records.get(split) or []
        if recs:
            s = summarize(recs)
            col[f"{prefix}_accuracy"] = s["accuracy"]
            col[f"{prefix}_loss"] = s["loss"]
    # boundary and overlap rows come from the held-out split when there is one
    for split in ("test", "validation", "train"):
        recs = split_records.get(split) or []
        if recs:
            s = summarize(recs)
            for key in ("bfscore", "iou", "mean_iou", "weighted_iou", "mean_accuracy"):
                col[key] = s[key]
            break
    return col


def _ordered_tags(tags) -> list[str]:
    tags = set(tags)
    return [t for t in TAG_ORDER if t in tags] + sorted(tags - set(TAG_ORDER))


def fold_report(result: FoldResult) -> MetricsReport:
    splits = {"train": result.train, "validation": result.validation, "test": result.test}
    all_recs = result.train + result.validation + result.test
    if not all_recs:
        raise ValueError("fold has no evaluated images")
    columns = {}
    for tag in _ordered_tags(r.tag for r in all_recs):
        columns[tag] = _column({k: [r for r in v if r.tag == tag] for k, v in splits.items()})
    columns["global"] = _column(splits)
    held = result.test or result.validation or result.train
    counts: dict[str, dict[str, int]] = {}
    total = {"roi": 0, "background": 0}
    for r in held:
        e = counts.setdefault(r.tag, {"roi": 0, "background": 0})
        e["roi"] += r.roi_pixels
        e["background"] += r.pixels - r.roi_pixels
        total["roi"] += r.roi_pixels
        total["background"] += r.pixels - r.roi_pixels
    counts["global"] = total
    return MetricsReport(columns, counts)


def build_report(results: list[FoldResult]) -> MetricsReport:
    """Table for one run, or fold tables plus their arithmetic mean."""
    if not results:
        raise ValueError("build_report needs at least one fold result")
    reports = [fold_report(r) for r in results]
    if len(reports) == 1:
        return reports[0]
    columns: dict[str, dict[str, float | None]] = {}
    tags = _ordered_tags(c for r in reports for c in r.columns if c != "global")
    for col in tags + ["global"]:
        columns[col] = {}
        for key, _ in TABLE_ROWS + EXTRA_ROWS:
            vals = [r.columns.get(col, {}).get(key) for r in reports]
            vals = [v for v in vals if v is not None]
            columns[col][key] = float(np.mean(vals)) if vals else None
    counts: dict[str, dict[str, int]] = {}
    for r in reports:
        for tag, e in r.pixel_counts.items():
            acc = counts.setdefault(tag, {"roi": 0, "background": 0})
            acc["roi"] += e["roi"]
            acc["background"] += e["background"]
    return MetricsReport(columns, counts, reports)
