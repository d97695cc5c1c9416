"""Report figures. Uses the non-interactive Agg backend throughout."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

FIG_WIDTH = 6.4
DPI = 100


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_metric_boxes(rows, metric, path, title=None):
    """One box per model of per-gauge mean scores for ``metric``."""
    per = {}
    for r in rows:
        if r.metric == metric:
            per.setdefault(r.model, {}).setdefault(r.gauge_id, []).append(r.value)
    models = sorted(per)
    data = [[float(np.mean(v)) for v in per[m].values()] for m in models]
    fig, ax = plt.subplots(figsize=(FIG_WIDTH, 0.6 * FIG_WIDTH))
    if data:
        ax.boxplot(data, tick_labels=models, showmeans=True)
        for i, d in enumerate(data, start=1):
            ax.plot(np.full(len(d), i), d, "k.", alpha=0.6)
    ax.set_ylabel(metric)
    ax.set_title(title or f"{metric} per gauge (mean over folds)")
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, path)


def plot_hydrograph(times, observed, forecasts: dict, path, title=""):
    """Observed stage with one line per forecast series."""
    fig, ax = plt.subplots(figsize=(FIG_WIDTH * 1.4, 0.5 * FIG_WIDTH))
    ax.plot(times, observed, color="k", lw=1.2, label="observed")
    for name, values in sorted(forecasts.items()):
        ax.plot(times, values, lw=0.9, label=name)
    ax.set_ylabel("stage (m)")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.autofmt_xdate()
    return _finish(fig, path)


_CONFUSION_CMAP = ListedColormap(["#ffffff", "#1f77b4", "#d62728", "#ff7f0e", "#bbbbbb"])


def plot_extent_confusion(pred, truth, path, title=""):
    """Map of hits (blue), false alarms (red), misses (orange), NODATA (grey)."""
    valid = pred.valid & truth.valid
    p, t = pred.wet(), truth.wet()
    code = np.zeros(pred.shape, dtype=int)
    code[p & t] = 1
    code[p & ~t] = 2
    code[~p & t] = 3
    code[~valid] = 4
    fig, ax = plt.subplots(figsize=(0.7 * FIG_WIDTH, 0.7 * FIG_WIDTH))
    ax.imshow(code, cmap=_CONFUSION_CMAP, vmin=0, vmax=4, interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title)
    return _finish(fig, path)
