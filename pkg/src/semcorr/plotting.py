"""Figures written next to the CSV/JSON outputs of the CLI.

Everything renders through the Agg backend with a fixed style and no
timestamp metadata, so a rerun produces byte-identical PNG files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "path.simplify": False,
}

# PNG metadata normally records the matplotlib version and software string;
# drop it so files depend only on the data.
_PNG_META = {"Software": None}


def _new(title: str, xlabel: str, ylabel: str):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def loss_curve(history, path, val_history=None) -> Path:
    """Per-epoch mean pull, push and total loss, with validation mGE on a twin axis."""
    fig, ax = _new("training loss", "epoch", "loss")
    epochs = sorted({h.epoch for h in history})
    by_epoch = {e: [h for h in history if h.epoch == e] for e in epochs}
    for name in ("pull", "push", "total"):
        ys = [np.mean([getattr(h, name) for h in by_epoch[e]]) for e in epochs]
        ax.plot(epochs, ys, label=name)
    ax.legend(loc="upper left")
    if val_history:
        twin = ax.twinx()
        xs, ys = zip(*val_history)
        twin.plot(xs, ys, "k--", marker="o", ms=3, label="val mGE")
        twin.set_ylabel("val mGE")
        twin.legend(loc="upper right")
    return save(fig, path)


def per_set_bars(report, path, baseline=None) -> Path:
    """mGE per correspondence set, optionally beside the random baseline."""
    fig, ax = _new(f"mGE per set ({report.category})", "set id", "mGE")
    ids = sorted(report.per_set)
    x = np.arange(len(ids))
    width = 0.4 if baseline is not None else 0.8
    ax.bar(x, [report.per_set[i] for i in ids], width, label="model")
    if baseline is not None:
        ax.bar(x + width, [baseline.per_set.get(i, np.nan) for i in ids], width, label="random")
        ax.legend()
    ax.set_xticks(x + (width / 2 if baseline is not None else 0))
    ax.set_xticklabels([str(i) for i in ids])
    return save(fig, path)


def registration_scatter(rows, path) -> Path:
    """Rotation vs translation error, one marker per registered pair, coloured by level."""
    fig, ax = _new("registration errors", "rotation error (deg)", "translation error")
    for level in sorted({r["level"] for r in rows}):
        sel = [r for r in rows if r["level"] == level]
        ax.scatter([r["rot_error_deg"] for r in sel], [r["trans_error"] for r in sel], s=12, label=level)
    ax.legend()
    return save(fig, path)


def error_histogram(values, path, title: str = "partial matching", bins: int = 30,
                    reference=None) -> Path:
    """Histogram of per-point geodesic errors, with the uncropped errors overlaid if given."""
    fig, ax = _new(title, "geodesic error", "count")
    values = np.asarray(values, dtype=np.float64)
    hi = max(float(values.max(initial=0.0)), float(np.max(reference, initial=0.0)) if reference is not None else 0.0)
    edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
    ax.hist(values, edges, alpha=0.7, label="cropped")
    if reference is not None:
        ax.hist(np.asarray(reference, dtype=np.float64), edges, alpha=0.5, label="complete")
        ax.legend()
    return save(fig, path)
