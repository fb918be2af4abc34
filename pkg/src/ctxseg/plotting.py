"""Figures for sweep tables; rendered off-screen next to the CSV they plot."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRICS = ("mF1", "mIoU", "mP", "mR")


def plot_sweep(rows: list[dict], key: str, path: str | Path, title: str = "") -> Path:
    """Macro metrics against the swept value: lines for numeric keys, grouped bars otherwise."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [str(r[key]) for r in rows]
    numeric = all(isinstance(r[key], (int, float)) for r in rows)
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=120)
    if numeric:
        xs = [r[key] for r in rows]
        for m in METRICS:
            ax.plot(xs, [r[m] for r in rows], marker="o", label=m)
        ax.set_xticks(xs)
    else:
        width = 0.8 / len(METRICS)
        for j, m in enumerate(METRICS):
            ax.bar([i + (j - 1.5) * width for i in range(len(rows))], [r[m] for r in rows],
                   width=width, label=m)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels)
    ax.set_xlabel(key)
    ax.set_ylabel("score on test split")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, loc="lower right")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.0, 3.0), dpi=120)
    ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
