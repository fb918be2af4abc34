"""Mask stitching, pooled confusion counts, and per-class / macro segmentation metrics.

Conventions: counts are pooled over every evaluated slide before any ratio is
taken. A ratio with a zero denominator is 0. A class with TP + FP + FN = 0
(absent from both ground truth and prediction) is excluded from macro means.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import ShapeError
from .synthwsi import BACKGROUND, TileGrid


class CompletenessError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


# RGB per class for overlays: BG transparent, E red, PET blue, SEL green
CLASS_COLORS = np.array([[0, 0, 0], [220, 40, 40], [40, 80, 230], [40, 190, 70]], dtype=np.uint8)


@dataclass
class SlideMask:
    mask: np.ndarray  # (H, W) uint8
    slide_id: str = ""
    checkpoint_id: str = ""


def stitch_masks(grid: TileGrid, patch_masks, background: int = BACKGROUND) -> SlideMask:
    """Place per-foreground-tile masks at their grid cells; other cells get ``background``.

    ``patch_masks`` is a sequence aligned with ``grid.coords`` or a mapping keyed
    by grid coordinate.
    """
    P = grid.patch
    coords = grid.coords
    if isinstance(patch_masks, dict):
        missing = [c for c in coords if c not in patch_masks]
        if missing:
            raise CompletenessError(f"no mask for foreground tiles {missing[:5]}")
        ordered = [patch_masks[c] for c in coords]
    else:
        ordered = list(patch_masks)
        if len(ordered) != len(coords):
            raise CompletenessError(f"{len(ordered)} masks for {len(coords)} foreground tiles")
    out = np.full((grid.rows * P, grid.cols * P), background, dtype=np.uint8)
    for (r, c), m in zip(coords, ordered):
        m = np.asarray(m)
        if m.shape != (P, P):
            raise ShapeError(f"tile mask at {(r, c)} has shape {m.shape}, expected {(P, P)}")
        out[r * P:(r + 1) * P, c * P:(c + 1) * P] = m
    return SlideMask(out, grid.slide_id)


def split_mask(mask: np.ndarray, P: int) -> np.ndarray:
    """Inverse of stitching: (H, W) -> (rows, cols, P, P)."""
    H, W = mask.shape
    if H % P or W % P:
        raise ShapeError(f"mask {mask.shape} not divisible by {P}")
    return mask.reshape(H // P, P, W // P, P).transpose(0, 2, 1, 3)


def confusion_matrix(pred, gt, k: int, into: np.ndarray | None = None) -> np.ndarray:
    """Counts[g, p] of pixels with ground truth g predicted as p; accumulates into ``into``."""
    pred = np.asarray(pred.mask if isinstance(pred, SlideMask) else pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= k):
            raise ValueError(f"{name} has classes outside [0, {k})")
    counts = np.bincount(gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel(),
                         minlength=k * k).reshape(k, k)
    if into is None:
        return counts
    into += counts
    return into


@dataclass
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    iou: float
    excluded: bool


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def class_metrics(cm: np.ndarray) -> list[ClassMetrics]:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    out = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        out.append(ClassMetrics(tp, fp, fn, total - tp - fp - fn, p, r, _ratio(2 * p * r, p + r),
                                _ratio(tp, tp + fp + fn), tp + fp + fn == 0))
    return out


@dataclass
class MacroMetrics:
    mF1: float
    mIoU: float
    mP: float
    mR: float


def macro_metrics(per_class) -> MacroMetrics:
    """Arithmetic means over included classes.

    Accepts ``ClassMetrics`` objects or bare per-class F1 values (for which
    only ``mF1`` is meaningful).
    """
    rows = list(per_class)
    if rows and not isinstance(rows[0], ClassMetrics):
        f1 = [float(v) for v in rows]
        if not f1:
            raise EvaluationError("no classes to average")
        m = sum(f1) / len(f1)
        return MacroMetrics(m, float("nan"), float("nan"), float("nan"))
    included = [r for r in rows if not r.excluded]
    if not included:
        raise EvaluationError("every class is excluded; nothing to average")
    n = len(included)
    return MacroMetrics(sum(r.f1 for r in included) / n, sum(r.iou for r in included) / n,
                        sum(r.precision for r in included) / n, sum(r.recall for r in included) / n)


@dataclass
class MetricsReport:
    class_names: list[str]
    confusion: np.ndarray
    per_class: list[ClassMetrics] = field(default_factory=list)
    macro: MacroMetrics | None = None

    @classmethod
    def from_confusion(cls, cm: np.ndarray, class_names) -> MetricsReport:
        per = class_metrics(cm)
        return cls(list(class_names), np.asarray(cm), per, macro_metrics(per))

    @property
    def excluded(self) -> list[str]:
        return [n for n, m in zip(self.class_names, self.per_class) if m.excluded]

    def to_dict(self) -> dict:
        return {
            "classes": {
                name: {"tp": m.tp, "fp": m.fp, "fn": m.fn, "tn": m.tn, "precision": m.precision,
                       "recall": m.recall, "f1": m.f1, "iou": m.iou, "excluded": m.excluded}
                for name, m in zip(self.class_names, self.per_class)
            },
            "macro": {"mF1": self.macro.mF1, "mIoU": self.macro.mIoU, "mP": self.macro.mP,
                      "mR": self.macro.mR},
            "excluded": self.excluded,
            "confusion": self.confusion.tolist(),
            "conventions": {
                "pooling": "confusion counts summed over all evaluated slides",
                "zero_denominator": "ratio reported as 0",
                "exclusion": "classes with TP+FP+FN == 0 are left out of macro means",
            },
        }

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "precision", "recall", "f1", "iou", "excluded"])
            for name, m in zip(self.class_names, self.per_class):
                w.writerow([name, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}",
                            f"{m.iou:.6f}", int(m.excluded)])
            w.writerow(["macro", f"{self.macro.mP:.6f}", f"{self.macro.mR:.6f}",
                        f"{self.macro.mF1:.6f}", f"{self.macro.mIoU:.6f}", 0])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def color_overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend class colours over the slide; background pixels are left untouched."""
    out = image.astype(np.float64).copy()
    fg = mask != BACKGROUND
    out[fg] = (1.0 - alpha) * out[fg] + alpha * CLASS_COLORS[mask[fg]]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def save_rgb_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)
