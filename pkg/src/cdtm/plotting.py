"""Matplotlib setup for report figures (file output only)."""

from __future__ import annotations

from pathlib import Path

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
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "svg.hashsalt": "cdtm",
}

PALETTE = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3"]


def new_figure(width: float = 6.4, height: float | None = None):
    height = height or width * 0.62
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def save(fig, path: str | Path, description: str = "") -> Path:
    """Write a PNG with fixed metadata so identical inputs give identical bytes."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="png", metadata={"Software": None, "Description": description})
    plt.close(fig)
    return path


def auc_bars(summary: list[dict], targets: list[str], tags: list[str], title: str):
    fig, ax = new_figure(max(4.0, 1.3 * len(targets) + 2.5))
    width = 0.8 / len(tags)
    lookup = {(s["domain"], s["model_tag"]): s for s in summary}
    for j, tag in enumerate(tags):
        xs = [i + (j - (len(tags) - 1) / 2) * width for i in range(len(targets))]
        means = [lookup[(t, tag)]["auc_mean"] for t in targets]
        stds = [lookup[(t, tag)]["auc_std"] for t in targets]
        ax.bar(xs, means, width=width * 0.95, yerr=stds, capsize=2, label=tag, color=PALETTE[j % len(PALETTE)])
    lo = min(s["auc_mean"] - s["auc_std"] for s in summary)
    hi = max(s["auc_mean"] + s["auc_std"] for s in summary)
    pad = max(hi - lo, 0.01) * 0.25
    ax.set_ylim(max(0.0, lo - pad), min(1.0, hi + pad))
    ax.set_xticks(range(len(targets)))
    ax.set_xticklabels(targets)
    ax.set_ylabel("test AUC (mean over seeds)")
    ax.set_title(title)
    ax.legend(ncol=min(len(tags), 4))
    return fig


def loss_curves(curves: dict[str, dict[str, list]], title: str, tags: list[str] | None = None,
                ylabel: str = "target prediction loss (windowed mean)"):
    """``curves[tag][label] = [(step, loss), ...]``; one color per tag, matching ``auc_bars``."""
    tags = tags or list(curves)
    fig, ax = new_figure()
    for tag, per_run in curves.items():
        color = PALETTE[tags.index(tag) % len(PALETTE)]
        for i, (label, pts) in enumerate(per_run.items()):
            if not pts:
                continue
            xs, ys = zip(*pts)
            ax.plot(xs, ys, color=color, lw=0.9, alpha=0.8, label=tag if i == 0 else None)
    ax.set_xlabel("training step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return fig
