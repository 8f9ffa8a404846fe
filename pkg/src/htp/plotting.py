"""Figures written next to the CLI's tabular outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    # Fixed metadata keeps reruns byte-identical.
    "svg.hashsalt": "htp",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence[Mapping], axis: str, path) -> Path:
    """Metric against the swept hyperparameter; ``rows`` carry value, HR10, NDCG10, AUC."""
    labels = [str(r["value"]) for r in rows]
    x = range(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for key, marker in (("HR10", "o"), ("NDCG10", "s"), ("AUC", "^")):
            ax.plot(x, [r[key] for r in rows], marker=marker, label=key.replace("10", "@10"))
        ax.set_xticks(list(x), labels)
        ax.set_xlabel(axis)
        ax.set_ylabel("metric")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ablation(rows: Sequence[Mapping], path, metric: str = "HR10") -> Path:
    """Bar chart of one metric per variant, with the full model highlighted."""
    names = [r["variant"] for r in rows]
    values = [r[metric] for r in rows]
    colors = ["tab:red" if n == "full" else "tab:gray" for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(rows)), 3.2))
        ax.bar(range(len(rows)), values, color=colors)
        ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
        ax.set_ylabel(metric.replace("10", "@10"))
        return _save(fig, path)


def plot_seasonal_profiles(shares: Mapping[int, Sequence[float]], path, labels: Mapping[int, str] | None = None) -> Path:
    """Monthly purchase shares for a handful of items."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for item, s in shares.items():
            ax.plot(range(12), s, marker=".", label=(labels or {}).get(item, str(item)))
        ax.set_xticks(range(12), MONTHS)
        ax.set_ylabel("share of interactions")
        if shares:
            ax.legend(frameon=False, fontsize=7, title="item")
        return _save(fig, path)


def plot_training_curve(history: Sequence[Mapping], path) -> Path:
    """Training loss and validation NDCG per epoch on twin axes."""
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(epochs, [h["loss"] for h in history], color="tab:blue")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss", color="tab:blue")
        val = ax.twinx()
        val.plot(epochs, [h["val"].get("NDCG@10", h["val"].get("NDCG", 0.0)) for h in history],
                 color="tab:orange")
        val.set_ylabel("validation NDCG@10", color="tab:orange")
        return _save(fig, path)
