"""SVG figure rendering for training and sweep metrics."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def moving_average(values, window: int) -> np.ndarray:
    """Trailing moving average; the first window-1 points average whatever
    prefix exists, so the output has the same length as the input."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = np.asarray(values, dtype=float)
    if values.ndim != 1:
        raise ValueError("expected a 1-d series")
    csum = np.cumsum(values)
    out = np.empty_like(values)
    head = min(window, len(values))
    out[:head] = csum[:head] / np.arange(1, head + 1)
    if len(values) > window:
        out[window:] = (csum[window:] - csum[:-window]) / window
    return out


def render_plot(series, labels, path, xlabel="episode", ylabel="return",
                title=None, smoothing_window: int = 1, xs=None) -> str:
    """Line chart of one or more series, rendered to an SVG file.

    `series` is a list of 1-d value sequences; `xs`, when given, supplies one
    x-vector per series (sweep plots index by vehicle count, training plots
    by episode).
    """
    if len(series) == 0 or any(len(s) == 0 for s in series):
        raise ValueError("cannot plot empty series")
    if len(labels) != len(series):
        raise ValueError("one label per series required")
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for i, (ys, label) in enumerate(zip(series, labels)):
        ys = moving_average(ys, smoothing_window)
        x = np.arange(len(ys)) if xs is None else np.asarray(xs[i])
        ax.plot(x, ys, label=label, linewidth=1.4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    path = str(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
