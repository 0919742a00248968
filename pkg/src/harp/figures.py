"""Matplotlib renderings of the report artifacts (always PNG, always Agg)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_latency(points, path: str | Path) -> None:
    """Latency vs sequence length with CI whiskers, one curve per variant."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=100)
    for variant, color in (("dense", "#1f77b4"), ("pruned", "#ff7f0e")):
        series = sorted(
            (p for p in points if p.variant == variant and not p.error),
            key=lambda p: p.seq_len,
        )
        if not series:
            continue
        ax.errorbar(
            [p.seq_len for p in series],
            [p.mean_s for p in series],
            yerr=[p.ci95_s for p in series],
            marker="o",
            capsize=3,
            label=variant,
            color=color,
        )
    ax.set_xscale("log", base=2)
    ax.set_xlabel("sequence length (tokens)")
    ax.set_ylabel("forward latency (s)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_search(schedule, trace, path: str | Path) -> None:
    """Chosen rescaling factor per layer plus the per-layer perplexity sweeps."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.6, 4.0), dpi=100)
    layers = sorted(schedule.layer_indices, reverse=True)
    by_layer = schedule.by_layer
    ax1.bar([str(layer) for layer in layers], [by_layer[layer] for layer in layers], color="#2ca02c")
    ax1.set_xlabel("layer (top-down)")
    ax1.set_ylabel("rescaling factor")
    ax1.set_ylim(0, 1.05)
    for layer in layers:
        rows = [(t.alpha, t.ppl) for t in trace if t.layer == layer and np.isfinite(t.ppl)]
        if rows:
            ax2.plot([a for a, _ in rows], [p for _, p in rows], marker=".", label=f"layer {layer}")
    ax2.set_xlabel("candidate rescaling factor")
    ax2.set_ylabel("perplexity")
    if layers:
        ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_importance(report, path: str | Path) -> None:
    """The four per-layer importance metrics as aligned curves."""
    layers = [r.layer for r in report]
    panels = (
        ("bi", "block influence"),
        ("similarity", "attention similarity"),
        ("hessian", "gradient-weight importance"),
        ("sim_hidden", "token similarity"),
    )
    fig, axes = plt.subplots(2, 2, figsize=(9.0, 6.0), dpi=100)
    for ax, (attr, title) in zip(axes.flat, panels):
        ax.plot(layers, [getattr(r, attr) for r in report], marker="o", color="#1f77b4")
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("layer")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
