"""Ground-truth attention masks built from each expression's Action Units.

Every expression maps to a set of AUs (the shipped table follows the
standard descriptions: Anger {4,5,7,23}, Disgust {9,15}, Fear
{1,2,4,5,7,20,26}, Happiness {6,12}, Sadness {1,4,15}, Surprise
{1,2,5,26}); every AU maps to landmarks and/or explicit triangles of the
canonical triangulation. An AU's region is the union of the triangles
incident to its landmarks (one-ring vicinity) plus any listed triangles;
an expression's mask is the pixel union over its AUs.

The exact AU -> landmark correspondence is anatomy-informed configuration,
shipped as an editable JSON file: swapping it changes the masks, never the
machinery. Landmark-derived regions only use triangles whose three
vertices are all real landmarks (< 68), so default masks stay inside the
face hull instead of leaking into the synthetic border sheet.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expressions import EXPRESSIONS
from .geometry import N_RAW, StandardLayout, Triangulation

_DATA = Path(__file__).parent / "data"


@dataclass
class AuRegion:
    landmarks: tuple[int, ...] = ()
    triangles: tuple[int, ...] = ()


@dataclass
class EkmanMask:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    expression: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        if self.expression not in EXPRESSIONS:
            raise ValueError(f"unknown expression {self.expression!r}")


def load_au_table(path=None) -> dict[str, list[int]]:
    raw = json.loads(Path(path or _DATA / "au_table.json").read_text(encoding="utf-8"))
    if set(raw) != set(EXPRESSIONS):
        raise ValueError(f"AU table must cover exactly {sorted(EXPRESSIONS)}, got {sorted(raw)}")
    table = {}
    for expr, aus in raw.items():
        if not all(isinstance(a, int) and a > 0 for a in aus):
            raise ValueError(f"{expr}: AU ids must be positive integers")
        table[expr] = list(aus)
    return table


def load_au_regions(path=None) -> dict[int, AuRegion]:
    raw = json.loads(Path(path or _DATA / "au_regions.json").read_text(encoding="utf-8"))
    regions = {}
    for key, val in raw.items():
        au = int(key)
        lms = tuple(val.get("landmarks", ()))
        tris = tuple(val.get("triangles", ()))
        if any(not 0 <= l < 89 for l in lms):
            raise ValueError(f"AU {au}: landmark index out of range")
        regions[au] = AuRegion(lms, tris)
    return regions


def incident_triangles(tri: Triangulation, landmark: int, real_only: bool = True) -> np.ndarray:
    """Indices of triangles having the landmark as a vertex.

    With real_only, triangles touching any synthetic point (index >= 68)
    are excluded, keeping landmark-derived regions inside the face hull.
    """
    has = (tri.triangles == landmark).any(axis=1)
    if real_only:
        has &= (tri.triangles < N_RAW).all(axis=1)
    return np.flatnonzero(has)


def _au_triangle_set(au: int, region: AuRegion, tri: Triangulation) -> np.ndarray:
    idx = set()
    for lm in region.landmarks:
        idx.update(incident_triangles(tri, lm).tolist())
    for t in region.triangles:
        if not 0 <= t < len(tri.triangles):
            raise ValueError(f"AU {au}: triangle index {t} out of range")
        idx.add(int(t))
    return np.array(sorted(idx), dtype=np.int64)


def rasterize_triangle_union(
    layout: StandardLayout, tri: Triangulation, triangle_indices
) -> np.ndarray:
    """Binary union of triangles; a pixel center on a boundary counts as in."""
    w, h = layout.width, layout.height
    mask = np.zeros((h, w), dtype=bool)
    pts = layout.points
    for t_idx in triangle_indices:
        a, b, c = pts[tri.triangles[t_idx]]
        x0 = max(0, int(np.floor(min(a[0], b[0], c[0]))))
        x1 = min(w - 1, int(np.ceil(max(a[0], b[0], c[0]))))
        y0 = max(0, int(np.floor(min(a[1], b[1], c[1]))))
        y1 = min(h - 1, int(np.ceil(max(a[1], b[1], c[1]))))
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(
            np.arange(x0, x1 + 1, dtype=np.float64),
            np.arange(y0, y1 + 1, dtype=np.float64),
        )
        denom = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        u = ((b[1] - c[1]) * (gx - c[0]) + (c[0] - b[0]) * (gy - c[1])) / denom
        v = ((c[1] - a[1]) * (gx - c[0]) + (a[0] - c[0]) * (gy - c[1])) / denom
        wbar = 1.0 - u - v
        eps = 1e-9
        mask[y0:y1 + 1, x0:x1 + 1] |= (u >= -eps) & (v >= -eps) & (wbar >= -eps)
    return mask


def build_mask(
    expression: str,
    au_table: dict[str, list[int]],
    au_regions: dict[int, AuRegion],
    layout: StandardLayout,
    tri: Triangulation,
) -> EkmanMask:
    """Union over the expression's AUs of each AU's triangle-union raster."""
    if expression not in au_table:
        raise ValueError(f"unknown expression {expression!r}")
    mask = np.zeros((layout.height, layout.width), dtype=bool)
    for au in au_table[expression]:
        if au not in au_regions:
            raise ValueError(f"AU {au} (needed by {expression}) missing from the region map")
        tset = _au_triangle_set(au, au_regions[au], tri)
        mask |= rasterize_triangle_union(layout, tri, tset)
    return EkmanMask(mask.astype(np.uint8), expression)


def build_all_masks(
    au_table: dict[str, list[int]],
    au_regions: dict[int, AuRegion],
    layout: StandardLayout,
    tri: Triangulation,
) -> dict[str, EkmanMask]:
    return {
        expr: build_mask(expr, au_table, au_regions, layout, tri)
        for expr in EXPRESSIONS
    }
