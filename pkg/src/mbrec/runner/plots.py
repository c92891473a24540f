"""Figure rendering for run reports. Everything is written to files (Agg backend)."""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "mbrec",
}


@contextmanager
def report_style():
    with plt.rc_context(STYLE):
        yield


def _figsize(width=6.0, height=None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    return width, height or width * golden


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.endswith(".png") else None)
    plt.close(fig)
    return path


def plot_training_curve(history: List[Dict[str, float]], behaviors: Sequence[str], path: str,
                        k: int = 5):
    """Mean loss and per-behavior validation NDCG@k against epoch."""
    epochs = list(range(1, len(history) + 1))
    with report_style():
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=_figsize(9, 3.2))
        ax1.plot(epochs, [h["loss.total"] for h in history], color="k", lw=1.2)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("mean training loss")
        for b in behaviors:
            key = f"{b}.ndcg@{k}"
            if key in history[0]:
                ax2.plot(epochs, [h[key] for h in history], lw=1.2, label=b)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel(f"val NDCG@{k}")
        ax2.legend()
        return _save(fig, path)


def plot_ablation(deltas: Dict[str, Dict[str, float]], behaviors: Sequence[str], path: str,
                  k: int = 5):
    """Grouped bars: NDCG@k change of each variant relative to the full model."""
    variants = [v for v in deltas if v != "full"]
    width = 0.8 / max(len(behaviors), 1)
    with report_style():
        fig, ax = plt.subplots(figsize=_figsize(7))
        for j, b in enumerate(behaviors):
            xs = [i + (j - (len(behaviors) - 1) / 2) * width for i in range(len(variants))]
            ax.bar(xs, [deltas[v].get(b, float("nan")) for v in variants], width, label=b)
        ax.axhline(0, color="k", lw=0.8)
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=20, ha="right")
        ax.set_ylabel(f"NDCG@{k} change vs full")
        ax.legend()
        return _save(fig, path)


def plot_sweep(parameter: str, values: Sequence[float], metrics: Dict[str, List[float]],
               path: str):
    """One line per series (e.g. ``purchase NDCG@5``) over the swept values."""
    with report_style():
        fig, ax = plt.subplots(figsize=_figsize(6))
        xs = list(range(len(values)))
        for name, ys in metrics.items():
            ax.plot(xs, ys, marker="o", lw=1.2, label=name)
        ax.set_xticks(xs)
        ax.set_xticklabels([f"{v:g}" for v in values])
        ax.set_xlabel(parameter)
        ax.set_ylabel("test metric")
        ax.legend()
        return _save(fig, path)


def plot_grouped(values: Dict[str, Dict[str, float]], behaviors: Sequence[str], path: str,
                 ylabel: str):
    """Bars per behavior for several named runs (baselines, behavior orders)."""
    names = list(values)
    width = 0.8 / max(len(names), 1)
    with report_style():
        fig, ax = plt.subplots(figsize=_figsize(6))
        for j, n in enumerate(names):
            xs = [i + (j - (len(names) - 1) / 2) * width for i in range(len(behaviors))]
            ax.bar(xs, [values[n].get(b, float("nan")) for b in behaviors], width, label=n)
        ax.set_xticks(range(len(behaviors)))
        ax.set_xticklabels(behaviors)
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)
