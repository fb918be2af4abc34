"""Evaluation over a split and the ablation sweeps built on train + evaluate."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from .evalmetrics import MetricsReport, SlideMask, confusion_matrix, stitch_masks
from .model import ContextSegNet, predict_slide, prepare_slide
from .numerics import precision
from .synthwsi import BACKGROUND, Dataset, tile_slide
from .training import TrainConfig, prepare_split, train

log = logging.getLogger(__name__)


def predict_masks(model: ContextSegNet, dataset: Dataset, split: str, cfg: TrainConfig) -> dict[str, SlideMask]:
    patch = dataset.params.patch
    out = {}
    with precision(cfg.precision):
        model = model.to(dtype=_dtype_of(model))
        for sid in dataset.split(split):
            slide = dataset.slides[sid]
            prepared = prepare_slide(slide, sid, patch, cfg.tau_fg, cfg.granularity)
            if prepared is None:
                grid = tile_slide(slide, patch, cfg.tau_fg, slide_id=sid)
                out[sid] = stitch_masks(grid, [])
                continue
            out[sid] = stitch_masks(prepared.grid, predict_slide(model, prepared))
    return out


def _dtype_of(model: ContextSegNet):
    return next(model.parameters()).dtype


def evaluate(model: ContextSegNet, dataset: Dataset, cfg: TrainConfig, split: str = "test") -> MetricsReport:
    k = cfg.n_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for sid, pred in predict_masks(model, dataset, split, cfg).items():
        confusion_matrix(pred, dataset.slides[sid].labels, k, into=cm)
    return MetricsReport.from_confusion(cm, dataset.manifest.class_names[:k])


def run_config(cfg: TrainConfig, dataset: Dataset, split: str = "test"):
    """Train one configuration from scratch and evaluate it."""
    result = train(cfg, dataset)
    return result, evaluate(result.model, dataset, cfg, split)


SWEEPS = {
    "layers": "gcn_layers",
    "fusion": "fusion",
    "granularity": "granularity",
}


def sweep(base: TrainConfig, dataset: Dataset, key: str, values, split: str = "test") -> list[dict]:
    """One independent train/evaluate run per value; rows keyed by the swept field."""
    rows = []
    for value in values:
        cfg = dataclasses.replace(base, **{key: value})
        log.info("sweep %s=%s", key, value)
        result, report = run_config(cfg, dataset, split)
        row = {key: value, "mF1": report.macro.mF1, "mIoU": report.macro.mIoU,
               "mP": report.macro.mP, "mR": report.macro.mR,
               "final_loss": result.checkpoint.final_loss}
        for name, m in zip(report.class_names, report.per_class):
            row[f"f1_{name}"] = m.f1
        rows.append(row)
    return rows


def write_rows(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path
