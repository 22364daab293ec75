"""Figure rendering for evaluation and training outputs.

Every entry point takes data already computed elsewhere and writes one
PNG; nothing here feeds back into the pipeline. Uses the non-interactive
matplotlib backend so the functions work in headless runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

ATTENTION_KEYS = ["moa_noc", "moa_occ", "mrd_noc", "mma_noc", "mma_occ"]
FLOW_KEYS = ["aepe_all", "aepe_noc", "aepe_occ"]


def _finite(rows, key):
    xs, ys = [], []
    for r in rows:
        v = r.get(key)
        if v is not None:
            xs.append(r.get("index", len(xs)))
            ys.append(v)
    return xs, ys


def render_metric_scatter(path, rows: list[dict]) -> str:
    """Per-image scatter of attention metrics and endpoint errors."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for key in ATTENTION_KEYS:
        xs, ys = _finite(rows, key)
        if ys:
            axes[0].scatter(xs, ys, s=12, label=key, alpha=0.7)
    axes[0].set_xlabel("image")
    axes[0].set_ylabel("value")
    axes[0].set_title("attention quality per image")
    axes[0].legend(fontsize=8)
    for key in ["rect_aepe_all"] + FLOW_KEYS:
        xs, ys = _finite(rows, key)
        if ys:
            axes[1].scatter(xs, ys, s=12, label=key, alpha=0.7)
    axes[1].set_xlabel("image")
    axes[1].set_ylabel("pixels")
    axes[1].set_title("endpoint error per image")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def render_training_curves(path, log_rows: list[dict]) -> str:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in log_rows]
    for key in ("loss", "seq_loss", "repulsion", "attraction"):
        ys = [r.get(key) for r in log_rows]
        pts = [(s, y) for s, y in zip(steps, ys) if y is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def render_ablation_bars(path, results: dict[str, dict]) -> str:
    """Grouped bars: one cluster per metric, one bar per model row."""
    keys = [k for k in ATTENTION_KEYS + FLOW_KEYS if any(results[m].get(k) is not None for m in results)]
    names = list(results)
    fig, ax = plt.subplots(figsize=(max(7, 1.6 * len(keys)), 4))
    width = 0.8 / max(1, len(names))
    xs = np.arange(len(keys))
    for j, name in enumerate(names):
        vals = [results[name].get(k) if results[name].get(k) is not None else 0.0 for k in keys]
        ax.bar(xs + j * width, vals, width=width, label=name)
    ax.set_xticks(xs + width * (len(names) - 1) / 2)
    ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=8)
    ax.set_title("ablation summary (lower-median per metric)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def render_attention_heatmap(path, weights: np.ndarray, query: tuple[int, int]) -> str:
    """One attention row reshaped to the cell grid, query cell marked."""
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(weights, cmap="viridis")
    ax.scatter([query[0]], [query[1]], marker="x", c="red", s=80)
    ax.set_xlabel("cell x")
    ax.set_ylabel("cell y")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)
