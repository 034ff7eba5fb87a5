"""PNG figures for the stats and bench reports.

Uses the object-oriented Figure API with an Agg canvas, so no global pyplot
state is touched and calls are safe from worker threads.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

# fixed metadata keeps the PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    return path


def plot_histogram(counts: Mapping, path, title: str = "", xlabel: str = "", ylabel: str = "count") -> Path:
    """Bar chart of an integer-keyed histogram ({value: count})."""
    keys = sorted(counts)
    fig = Figure(figsize=(6, 3.5))
    ax = fig.add_subplot()
    ax.bar([str(k) for k in keys], [counts[k] for k in keys], color="#4c72b0")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(keys) > 20:
        for label in ax.get_xticklabels():
            label.set_rotation(90)
    return _save(fig, path)


def plot_category_bars(values: Mapping[str, float], path, title: str = "", ylabel: str = "",
                       ylim: Optional[tuple] = None, fmt: str = "{:.2f}") -> Path:
    """One labeled bar per category, in the order given."""
    names = list(values)
    fig = Figure(figsize=(8, 3.8))
    ax = fig.add_subplot()
    bars = ax.bar(names, [values[n] for n in names], color="#dd8452")
    for bar, n in zip(bars, names):
        ax.annotate(fmt.format(values[n]), (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    if ylim is not None:
        ax.set_ylim(*ylim)
    for label in ax.get_xticklabels():
        label.set_rotation(30)
        label.set_ha("right")
    return _save(fig, path)


def plot_score_distribution(dist: Mapping[str, Mapping[int, int]], path, title: str = "") -> Path:
    """Grouped bars: for each judged dimension, how many pairs received each score 1..5."""
    fig = Figure(figsize=(7, 3.5))
    ax = fig.add_subplot()
    dims = list(dist)
    width = 0.8 / max(len(dims), 1)
    for i, dim in enumerate(dims):
        xs = [s + (i - (len(dims) - 1) / 2) * width for s in range(1, 6)]
        ax.bar(xs, [dist[dim].get(s, 0) for s in range(1, 6)], width=width, label=dim)
    ax.set_xticks(range(1, 6))
    ax.set_xlabel("score")
    ax.set_ylabel("pairs")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)
