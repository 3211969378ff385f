"""Optional PNG rendering of heatmaps, masks, and dendrograms.

matplotlib is imported lazily so the rest of the package works without
it; callers that pass --render get a warning instead of a crash when
the extra is not installed.
"""

from __future__ import annotations

import sys

import numpy as np


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg", force=True)
        import matplotlib.pyplot as plt

        return plt
    except ImportError:
        print("render: matplotlib not installed; skipping PNGs", file=sys.stderr)
        return None


def render_heatmap(pixels: np.ndarray, out_path, title: str = "") -> bool:
    plt = _pyplot()
    if plt is None:
        return False
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(pixels, cmap="jet", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title)
    ax.set_axis_off()
    fig.savefig(out_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return True


def render_mask_overlay(mask: np.ndarray, out_path, title: str = "",
                        base: np.ndarray | None = None) -> bool:
    plt = _pyplot()
    if plt is None:
        return False
    fig, ax = plt.subplots(figsize=(4, 4))
    if base is not None:
        ax.imshow(base, cmap="gray", vmin=0.0, vmax=1.0)
        shaded = np.zeros(mask.shape + (4,))
        shaded[..., 0] = 1.0
        shaded[..., 3] = 0.45 * (mask > 0)
        ax.imshow(shaded)
    else:
        ax.imshow(mask > 0, cmap="gray", vmin=0, vmax=1)
    ax.set_title(title)
    ax.set_axis_off()
    fig.savefig(out_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return True


def render_dendrogram(dendrogram, out_path, title: str = "") -> bool:
    """Draw merges as a classic rectangular dendrogram."""
    plt = _pyplot()
    if plt is None:
        return False
    n = len(dendrogram.labels)
    # Leaf x positions follow a left-to-right traversal of the final tree.
    order = _leaf_order(dendrogram)
    xpos = {leaf: float(i) for i, leaf in enumerate(order)}
    height = {i: 0.0 for i in range(n)}
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * n), 4))
    for t, merge in enumerate(dendrogram.merges):
        xa, xb = xpos[merge.a], xpos[merge.b]
        ha, hb = height[merge.a], height[merge.b]
        h = merge.height
        ax.plot([xa, xa, xb, xb], [ha, h, h, hb], color="tab:blue", lw=1.5)
        xpos[n + t] = 0.5 * (xa + xb)
        height[n + t] = h
    ax.set_xticks(range(n))
    ax.set_xticklabels([dendrogram.labels[i] for i in order], rotation=45,
                       ha="right")
    ax.set_ylabel("merge height")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return True


def _leaf_order(dendrogram) -> list[int]:
    n = len(dendrogram.labels)
    children = {}
    for t, merge in enumerate(dendrogram.merges):
        children[n + t] = (merge.a, merge.b)
    order: list[int] = []
    stack = [n + len(dendrogram.merges) - 1] if dendrogram.merges else [0]
    while stack:
        node = stack.pop()
        if node < n:
            order.append(node)
        else:
            a, b = children[node]
            stack.append(b)
            stack.append(a)
    return order
