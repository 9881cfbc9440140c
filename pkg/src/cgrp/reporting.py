"""Static figures rendered from stored metric documents and loss logs.

Every figure is a pure function of its input file, written without
timestamps or software tags so that re-rendering gives identical bytes.
"""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .checkpoint import atomic_write  # noqa: E402
from .losses import parse_record  # noqa: E402
from .metrics import HIGHER_IS_BETTER  # noqa: E402

_STYLE = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return Path(path)


def plot_metric_bars(doc: dict, path) -> Path:
    """One panel per metric, one bar per method (corpus means)."""
    metrics = doc["metrics"]
    names = list(doc["rows"])
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0), squeeze=False)
        colors = plt.cm.tab10(np.arange(len(names)) % 10)
        for ax, metric in zip(axes[0], metrics):
            values = [doc["rows"][n]["means"].get(metric, np.nan) for n in names]
            ax.bar(np.arange(len(names)), values, color=colors)
            ax.set_xticks(np.arange(len(names)), names, rotation=30, ha="right")
            arrow = "higher is better" if HIGHER_IS_BETTER.get(metric, True) else "lower is better"
            ax.set_title(f"{metric} ({arrow})")
        fig.tight_layout()
        return _save(fig, path)


def plot_metric_items(doc: dict, path) -> Path:
    """Per-item values of every metric, one line per method."""
    metrics = doc["metrics"]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(len(metrics), 1, figsize=(6.0, 2.2 * len(metrics)), squeeze=False)
        for ax, metric in zip(axes[:, 0], metrics):
            for name, row in doc["rows"].items():
                ids = sorted(row["items"])
                ax.plot(np.arange(len(ids)), [row["items"][i].get(metric, np.nan) for i in ids],
                        marker="o", markersize=3, label=name)
            ax.set_ylabel(metric)
        axes[-1, 0].set_xlabel("item")
        axes[0, 0].legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def plot_document(doc: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    mode = doc["mode"]
    return [plot_metric_bars(doc, out_dir / f"{mode}_bars.png"),
            plot_metric_items(doc, out_dir / f"{mode}_items.png")]


def read_loss_log(path) -> list[dict]:
    return [parse_record(line) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_losses(path, out_path, keys=None) -> Path:
    """Training curves from a loss log (``L_*`` keys by default)."""
    records = read_loss_log(path)
    if not records:
        raise ValueError(f"{path}: empty loss log")
    if keys is None:
        keys = [k for k in records[0] if k.startswith("L_")]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        for key in keys:
            pts = [(r["step"], r[key]) for r in records if key in r]
            if pts:
                steps, values = zip(*pts)
                ax.plot(steps, values, label=key, linewidth=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, out_path)
