"""Figures written next to the text/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_fifo_occupancy(trace, path, optimized: dict | None = None) -> Path:
    """Depth vs. peak occupancy per FIFO, log scale, one row per edge."""
    edges = trace.edges
    n = len(edges)
    fig, ax = plt.subplots(figsize=(7, max(3.0, 0.11 * n + 1)))
    y = np.arange(n)
    ax.barh(y, [e.capacity for e in edges], color="0.85", label="depth")
    ax.barh(y, [e.max_occupancy for e in edges], color="tab:blue", height=0.5, label="peak occupancy")
    if optimized:
        ax.scatter([optimized[e.edge_id] for e in edges], y, s=6, color="tab:red", zorder=3,
                   label="optimized depth")
    ax.set_yticks(y)
    ax.set_yticklabels([e.edge_id for e in edges], fontsize=4)
    ax.invert_yaxis()
    ax.set_xscale("log")
    ax.set_xlabel("pixel-vectors")
    ax.set_title(f"FIFO occupancy (memory efficiency {trace.memory_efficiency():.1%})")
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_storage_comparison(rows, path) -> Path:
    """``rows``: (layer, line_bits, encoded_bits) per windowed layer."""
    names = [r[0] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.25 * len(rows) + 2), 3.2))
    ax.bar(x - 0.2, [r[1] for r in rows], width=0.4, label="line buffer")
    ax.bar(x + 0.2, [r[2] for r in rows], width=0.4, label="encoded")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=90, fontsize=5)
    ax.set_ylabel("window buffer bits")
    ax.set_yscale("symlog")
    ax.legend()
    return _save(fig, path)


def plot_resources(res, path) -> Path:
    layers = [l for l in res.layers if l.kind == "ConvBN"]
    x = np.arange(len(layers))
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(max(4.0, 0.2 * len(layers) + 2), 4.5), sharex=True)
    ax0.bar(x, [l.buffer_bits for l in layers], color="tab:blue")
    ax0.set_ylabel("buffer bits")
    ax1.bar(x, [l.multipliers for l in layers], color="tab:orange")
    ax1.set_ylabel(f"multipliers (RF={res.reuse_factor})")
    ax1.set_xticks(x)
    ax1.set_xticklabels([l.node for l in layers], rotation=90, fontsize=5)
    return _save(fig, path)


def plot_class_iou(ious, names, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    vals = np.nan_to_num(np.asarray(ious, dtype=float), nan=0.0)
    ax.bar(names, vals, color="tab:green")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    return _save(fig, path)
