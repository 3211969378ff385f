"""SLIC superpixel segmentation for grayscale face images.

Regions serve as the interpretable units of the explainer: each superpixel
is toggled on/off as one binary feature. Images are expected in [0, 1];
intensities are internally scaled to 0..255 so the classic compactness
default of 10 balances color and space the way it does for 8-bit SLIC.

Everything is deterministic: grid initialization, ascending-index
assignment with strict-improvement updates (ties go to the lower label),
and scan-order relabeling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import pgm


@dataclass
class SuperpixelLabels:
    """A complete segmentation: every pixel carries a label in [0, region_count)."""

    labels: np.ndarray  # (H, W) int32
    region_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise ValueError("label map must be a non-empty 2-d array")
        if self.region_count < 1:
            raise ValueError("region_count must be >= 1")
        lo, hi = int(self.labels.min()), int(self.labels.max())
        if lo < 0 or hi >= self.region_count:
            raise ValueError(f"labels outside [0, {self.region_count})")


def _grid_shape(k: int, h: int, w: int) -> tuple[int, int]:
    ny = max(1, int(math.floor(math.sqrt(k * h / w) + 0.5)))
    nx = max(1, int(math.floor(k / ny + 0.5)))
    return ny, nx


def slic(
    img: np.ndarray,
    k_target: int = 30,
    compactness: float = 10.0,
    iterations: int = 10,
) -> SuperpixelLabels:
    """Segment a grayscale image into ~k_target compact regions.

    Cluster centers start on a regular grid at spacing ~sqrt(N/k); pixels
    are assigned in the combined (intensity, x, y) metric
    D^2 = d_color^2 + (m/S)^2 d_space^2 within a 2S window of each center,
    then centers are recomputed, for a fixed number of iterations. A
    post-pass re-attaches disconnected fragments so each final label is one
    4-connected region.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("need a non-empty 2-d grayscale image")
    if k_target < 1:
        raise ValueError("k_target must be positive")
    h, w = img.shape
    n = h * w
    if k_target > n:
        raise ValueError(f"k_target={k_target} exceeds pixel count {n}")
    if compactness <= 0 or iterations < 1:
        raise ValueError("compactness must be positive, iterations >= 1")
    if k_target == 1:
        return SuperpixelLabels(np.zeros((h, w), dtype=np.int32), 1)

    intensity = img * 255.0
    ny, nx = _grid_shape(k_target, h, w)
    k = ny * nx
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    centers = np.zeros((k, 3))  # intensity, x, y
    for i in range(ny):
        for j in range(nx):
            yq = min(h - 1, int(math.floor(cy[i] + 0.5)))
            xq = min(w - 1, int(math.floor(cx[j] + 0.5)))
            centers[i * nx + j] = (intensity[yq, xq], cx[j], cy[i])

    s = math.sqrt(n / k)
    spatial = (compactness / s) ** 2
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    labels = np.zeros((h, w), dtype=np.int32)
    for _ in range(iterations):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for c_idx in range(k):
            ci, cxx, cyy = centers[c_idx]
            x0 = max(0, int(cxx - 2 * s))
            x1 = min(w, int(cxx + 2 * s) + 1)
            y0 = max(0, int(cyy - 2 * s))
            y1 = min(h, int(cyy + 2 * s) + 1)
            win = np.s_[y0:y1, x0:x1]
            d2 = (intensity[win] - ci) ** 2 + spatial * (
                (gx[win] - cxx) ** 2 + (gy[win] - cyy) ** 2
            )
            better = d2 < best[win]  # strict: first (lowest) center keeps ties
            best[win][better] = d2[better]
            labels[win][better] = c_idx
        if (labels < 0).any():
            # window misses are possible on extreme aspect ratios; fall back
            # to plain nearest center in space for the stragglers
            miss = labels < 0
            dx = gx[miss][:, None] - centers[None, :, 1]
            dy = gy[miss][:, None] - centers[None, :, 2]
            labels[miss] = np.argmin(dx**2 + dy**2, axis=1)
        for c_idx in range(k):
            sel = labels == c_idx
            if sel.any():
                centers[c_idx] = (
                    intensity[sel].mean(),
                    gx[sel].mean(),
                    gy[sel].mean(),
                )

    labels = _enforce_connectivity(labels)
    labels = _relabel_scan_order(labels)
    return SuperpixelLabels(labels, int(labels.max()) + 1)


_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each label's largest 4-connected component; merge the rest into
    their largest adjacent region (ties to the lowest label)."""
    h, w = labels.shape
    out = labels.copy()
    orphans = []  # (min flat index, pixel mask) for deterministic order
    for lab in np.unique(labels):
        comp, n_comp = ndimage.label(labels == lab, structure=_FOUR)
        if n_comp <= 1:
            continue
        sizes = ndimage.sum_labels(np.ones_like(comp), comp, np.arange(1, n_comp + 1))
        # keep the largest; break size ties by earliest pixel in scan order
        firsts = [int(np.flatnonzero((comp == c + 1).ravel())[0]) for c in range(n_comp)]
        keep = max(range(n_comp), key=lambda c: (sizes[c], -firsts[c]))
        for c in range(n_comp):
            if c == keep:
                continue
            orphans.append((firsts[c], comp == c + 1))
    if not orphans:
        return out
    for _, mask in orphans:
        out[mask] = -1
    counts = np.bincount(out[out >= 0], minlength=int(labels.max()) + 1)
    orphans.sort(key=lambda t: t[0])
    pending = orphans
    while pending:
        deferred = []
        progressed = False
        for first, mask in pending:
            grown = ndimage.binary_dilation(mask, structure=_FOUR) & ~mask
            neigh = out[grown]
            neigh = neigh[neigh >= 0]
            if neigh.size == 0:
                deferred.append((first, mask))
                continue
            cand = np.unique(neigh)
            target = int(cand[np.lexsort((cand, -counts[cand]))[0]])
            out[mask] = target
            counts[target] += int(mask.sum())
            progressed = True
        if not progressed:
            raise ValueError("segmentation has an isolated fragment ring")  # unreachable
        pending = deferred
    return out


def _relabel_scan_order(labels: np.ndarray) -> np.ndarray:
    """Relabel to contiguous ids ordered by first appearance in scan order."""
    flat = labels.ravel()
    _, first_idx = np.unique(flat, return_index=True)
    order = flat[np.sort(first_idx)]
    remap = np.empty(int(labels.max()) + 1, dtype=np.int32)
    remap[order] = np.arange(len(order), dtype=np.int32)
    return remap[labels]


def save_labels(path, sp: SuperpixelLabels) -> None:
    """Debug dump of a label map as 16-bit PGM (label ids stored verbatim)."""
    if sp.region_count > 65536:
        raise ValueError("too many regions for 16-bit storage")
    pgm.write_pgm(path, sp.labels.astype(np.uint16), 65535)


def load_labels(path) -> SuperpixelLabels:
    data, maxval = pgm.read_pgm(path)
    if maxval != 65535:
        raise ValueError(f"{path}: label maps are 16-bit PGM")
    labels = data.astype(np.int32)
    return SuperpixelLabels(labels, int(labels.max()) + 1)
