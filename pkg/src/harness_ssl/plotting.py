"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(rows: Sequence[Mapping], path, title: str = "") -> Path:
    """Loss and masked accuracy against step for one training run."""
    steps = [r["step"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2)
        ax_l.plot(steps, [r["loss"] for r in rows], color="C0")
        ax_l.set_xlabel("step")
        ax_l.set_ylabel("loss")
        ax_a.plot(steps, [r["masked_acc"] for r in rows], label="masked", color="C1")
        ax_a.plot(steps, [r["unmasked_acc"] for r in rows], label="unmasked", color="C2", ls="--")
        ax_a.set_xlabel("step")
        ax_a.set_ylabel("accuracy")
        ax_a.set_ylim(0, 1.02)
        ax_a.legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_curve_comparison(curves: Mapping[str, Sequence[Mapping]], path, metric: str = "loss",
                          title: str = "") -> Path:
    """Overlay one metric from several runs sharing a step grid."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (name, rows) in enumerate(curves.items()):
            ax.plot([r["step"] for r in rows], [r[metric] for r in rows], label=name, color=f"C{i}")
        ax.set_xlabel("step")
        ax.set_ylabel(metric)
        ax.legend()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_param_counts(names: Sequence[str], ours: Sequence[float], published: Sequence[float], path) -> Path:
    """Bar chart of computed vs published parameter counts (millions)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = range(len(names))
        ax.bar([i - 0.2 for i in x], ours, width=0.4, label="computed", color="C0")
        ax.bar([i + 0.2 for i in x], [p if p is not None else 0 for p in published], width=0.4,
               label="published", color="C7")
        ax.set_xticks(list(x))
        ax.set_xticklabels(names)
        ax.set_ylabel("parameters (M)")
        ax.legend()
        return _save(fig, path)
