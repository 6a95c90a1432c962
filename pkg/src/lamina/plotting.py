"""Figures for metrics records (matplotlib, file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finite(series):
    return np.array([np.nan if v is None else v for v in series], dtype=np.float64)


def plot_accuracy(records, path):
    """Test accuracy per epoch (epoch 0 is the untrained model) for one or more runs."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for rec in records:
        epochs = [0] + [e["epoch"] for e in rec.epochs]
        acc = [rec.initial_test_accuracy] + [e["test_accuracy"] for e in rec.epochs]
        ax.plot(epochs, acc, marker="o", label=f"{rec.experiment} (seed {rec.seed})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_series(record, name, path, window=10):
    """Per-layer step series (``"ger"``, ``"ler"`` or ``"mad"``) with a moving average."""
    series = getattr(record, name)
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for i, values in enumerate(series):
        y = _finite(values)
        if y.size == 0 or np.all(np.isnan(y)):
            continue
        if window > 1 and y.size >= window:
            kernel = np.ones(window) / window
            y = np.convolve(np.nan_to_num(y), kernel, mode="valid")
        ax.plot(np.arange(y.size), y, label=f"layer {i}")
        drawn = True
    ax.set_xlabel("step")
    ax.set_ylabel(name.upper())
    ax.set_title(f"{record.experiment}: {name.upper()} per layer")
    ax.grid(alpha=0.3)
    if drawn:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def render_figures(record, out_dir, stem=None):
    """Write every applicable figure for ``record`` into ``out_dir``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{record.experiment}-seed{record.seed}"
    paths = [plot_accuracy([record], out_dir / f"{stem}-accuracy.png")]
    for name in ("ger", "ler", "mad"):
        series = getattr(record, name)
        if any(v is not None for values in series for v in values):
            paths.append(plot_series(record, name, out_dir / f"{stem}-{name}.png"))
    return paths
