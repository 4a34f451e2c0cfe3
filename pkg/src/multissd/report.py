"""Ablation tables (tab-separated) and figures rendered to files."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import ComboResult  # noqa: E402


def metric_columns(result: ComboResult) -> list[tuple[str, float]]:
    cols = [(f"video-mAP@{r.label}", r.mean_ap) for r in result.video]
    cols.append((f"frame-mAP@{result.frame.label}", result.frame.mean_ap))
    return cols


def write_table(results: Sequence[ComboResult], path, class_names: Sequence[str] = ()) -> Path:
    """One row per stream combination; per-class frame AP columns follow the summary metrics."""
    path = Path(path)
    if not results:
        raise ValueError("no results to tabulate")
    header = ["combination"] + [name for name, _ in metric_columns(results[0])]
    header += [f"frame-AP[{n}]" for n in class_names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for r in results:
            row = [r.recipe] + [f"{v:.4f}" for _, v in metric_columns(r)]
            row += [f"{r.frame.ap.get(c, 0.0):.4f}" for c in range(len(class_names))]
            w.writerow(row)
    return path


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for row in rows:
        for k, v in row.items():
            if k != "combination":
                row[k] = float(v)
    return rows


def plot_ablation(results: Sequence[ComboResult], path) -> Path:
    """Grouped bars: each combination against every summary metric."""
    names = [n for n, _ in metric_columns(results[0])]
    values = np.array([[v for _, v in metric_columns(r)] for r in results])
    x = np.arange(len(results))
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.7 * len(results) + 2), 4.0))
    for j, name in enumerate(names):
        ax.bar(x + (j - (len(names) - 1) / 2) * width, values[:, j], width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels([r.recipe for r in results], rotation=40, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mAP")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_class_delta(results: Sequence[ComboResult], class_names: Sequence[str], path,
                     baseline: str = "2dRGB") -> Path:
    """Per-class frame AP of each combination minus the baseline combination."""
    by_name = {r.recipe: r for r in results}
    if baseline not in by_name:
        baseline = results[0].recipe
    base = by_name[baseline]
    others = [r for r in results if r.recipe != baseline] or list(results)
    delta = np.array([[r.frame.ap.get(c, 0.0) - base.frame.ap.get(c, 0.0)
                       for c in range(len(class_names))] for r in others])
    fig, ax = plt.subplots(figsize=(max(5.0, 0.8 * len(class_names) + 2), 0.35 * len(others) + 1.5))
    lim = max(float(np.abs(delta).max()), 1e-3)
    im = ax.imshow(delta, cmap="RdBu", vmin=-lim, vmax=lim, aspect="auto")
    ax.set_xticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=30, ha="right", fontsize=8)
    ax.set_yticks(range(len(others)))
    ax.set_yticklabels([r.recipe for r in others], fontsize=8)
    ax.set_title(f"frame AP change vs {baseline}", fontsize=9)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
