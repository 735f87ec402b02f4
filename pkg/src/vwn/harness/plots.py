"""SVG figures for training curves and scaling fits."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sweep import ScalingFit  # noqa: E402
from .train import SweepRecord  # noqa: E402

# fixed salt and no date stamp keep the SVG bytes reproducible
matplotlib.rcParams["svg.hashsalt"] = "vwn"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _label(rec: SweepRecord) -> str:
    return f"r={rec.r} (m={rec.m}, n={rec.n})"


def plot_loss_curves(records: list[SweepRecord], path, metric: str = "ntp_loss", title: str | None = None) -> Path:
    """Loss vs. tokens seen, one line per (r, m, n) arm averaged over seeds."""
    groups: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for rec in records:
        value = getattr(rec, metric)
        if value is not None:
            groups[_label(rec)][rec.tokens_seen].append(value)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label in sorted(groups):
        pts = sorted(groups[label].items())
        xs = [t for t, _ in pts]
        ys = [float(np.mean(v)) for _, v in pts]
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.2, label=label)
    ax.set_xlabel("tokens seen")
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_title(title or f"{metric.replace('_', ' ')} vs. tokens")
    ax.grid(alpha=0.3)
    if groups:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_scaling_fit(r_values, losses, fit: ScalingFit, path) -> Path:
    """Final loss against log2(r) with the fitted line."""
    x = np.log2([float(r) for r in r_values])
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.scatter(x, losses, color="tab:red", zorder=3, label="final loss")
    if fit.slope is not None:
        xs = np.linspace(x.min(), x.max(), 50)
        r2 = "" if fit.r_squared is None else f", $R^2$={fit.r_squared:.4f}"
        ax.plot(xs, fit.slope * xs + fit.intercept, color="tab:blue",
                label=f"y = {fit.slope:.4f} log2(r) + {fit.intercept:.4f}{r2}")
    ax.set_xlabel("log2(r)")
    ax.set_ylabel("final next-token loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_attenuation(report, path) -> Path:
    idx = [c.layer_index for c in report.contributions]
    norms = [c.contribution_norm for c in report.contributions]
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.bar(idx, norms, color=["tab:green" if c.classification == "window" else "tab:gray"
                              for c in report.contributions])
    ax.set_xlabel("source layer")
    ax.set_ylabel("carry operator norm")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    return _save(fig, path)
