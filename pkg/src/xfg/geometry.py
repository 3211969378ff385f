"""Face geometry: landmark sets, Delaunay triangulation, and the piecewise
affine transformation that moves a face (and its relevance image) into the
canonical face space.

Coordinates are pixel coordinates, x right / y down, with integer positions
at pixel centers; a W x H image spans [0, W-1] x [0, H-1].

Landmark order convention: the standard 68-point set first, then 17
synthetic points spread along the interior of the top edge, then the four
image corners in the order (0,0), (W-1,0), (0,H-1), (W-1,H-1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay as _SciDelaunay
from scipy.spatial import QhullError

N_RAW = 68
N_TOP = 17
N_AUGMENTED = 89

_DEGENERATE_AREA = 1e-9


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class LandmarkSet:
    """An ordered set of facial landmarks in image coordinates."""

    points: np.ndarray  # (N, 2) float64, columns x, y
    kind: str  # "raw68" | "augmented89"
    image_width: int
    image_height: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        expected = {"raw68": N_RAW, "augmented89": N_AUGMENTED}.get(self.kind)
        if expected is None:
            raise ValueError(f"unknown landmark kind {self.kind!r}")
        if self.points.shape != (expected, 2):
            raise ValueError(
                f"{self.kind} landmark set needs {expected} points, "
                f"got shape {self.points.shape}"
            )
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        x, y = self.points[:, 0], self.points[:, 1]
        if (x < 0).any() or (x > self.image_width - 1).any() \
                or (y < 0).any() or (y > self.image_height - 1).any():
            bad = int(np.argmax((x < 0) | (x > self.image_width - 1)
                                | (y < 0) | (y > self.image_height - 1)))
            raise ValueError(
                f"landmark {bad} at ({x[bad]}, {y[bad]}) outside "
                f"[0, {self.image_width - 1}] x [0, {self.image_height - 1}]"
            )


@dataclass
class StandardLayout:
    """Canonical positions of the 89 landmarks at the canonical resolution."""

    points: np.ndarray  # (89, 2) float64
    width: int
    height: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (N_AUGMENTED, 2):
            raise ValueError(f"layout needs {N_AUGMENTED} points, got {self.points.shape}")
        w, h = self.width, self.height
        corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
        if not np.array_equal(self.points[N_RAW + N_TOP:], corners):
            raise ValueError("layout's last four points must be the image corners")
        x, y = self.points[:, 0], self.points[:, 1]
        if (x < 0).any() or (x > w - 1).any() or (y < 0).any() or (y > h - 1).any():
            raise ValueError("layout point out of bounds")

    def as_landmarks(self) -> LandmarkSet:
        return LandmarkSet(self.points.copy(), "augmented89", self.width, self.height)


@dataclass
class Triangulation:
    """Index triples into an 89-point set, in canonical (sorted) order."""

    triangles: np.ndarray  # (T, 3) int32


@dataclass
class PiecewiseAffineMap:
    """Per-triangle affine transforms between a source face and the layout.

    ``forward`` maps source coordinates into the canonical frame; ``inverse``
    goes the other way (used by the backward warp). Both are (T, 2, 3).
    """

    forward: np.ndarray
    inverse: np.ndarray
    triangulation: Triangulation


def augment_landmarks(lm: LandmarkSet) -> LandmarkSet:
    """Extend a 68-point set with 17 top-border points and the 4 corners.

    The border points sit on y=0 at x = round(i*(W-1)/18) for i = 1..17
    (round half up); corners follow in the order (0,0), (W-1,0), (0,H-1),
    (W-1,H-1).
    """
    if lm.kind != "raw68":
        raise ValueError(f"expected raw68 landmarks, got {lm.kind}")
    w, h = lm.image_width, lm.image_height
    top = np.array(
        [[_round_half_up(i * (w - 1) / 18.0), 0.0] for i in range(1, N_TOP + 1)],
        dtype=np.float64,
    )
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    points = np.concatenate([lm.points, top, corners], axis=0)
    return LandmarkSet(points, "augmented89", w, h)


def delaunay(points: np.ndarray) -> Triangulation:
    """Delaunay-triangulate a point set, with canonicalized triangle order.

    Each triple is sorted ascending and the triples are sorted
    lexicographically, so the result is reproducible for a fixed input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 two-dimensional points")
    # Exact duplicate check before Qhull sees the input.
    _, counts = np.unique(pts, axis=0, return_counts=True)
    if (counts > 1).any():
        raise ValueError("duplicate points in triangulation input")
    try:
        tri = _SciDelaunay(pts)
    except QhullError as exc:
        raise ValueError(f"degenerate point set (collinear?): {exc}") from exc
    if len(tri.simplices) == 0:
        raise ValueError("degenerate point set: no triangles produced")
    triples = np.sort(tri.simplices.astype(np.int32), axis=1)
    order = np.lexsort((triples[:, 2], triples[:, 1], triples[:, 0]))
    return Triangulation(triples[order])


def _triangle_areas(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = points[triangles[:, 0]]
    b = points[triangles[:, 1]]
    c = points[triangles[:, 2]]
    return 0.5 * np.abs(
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )


def _solve_affines(src: np.ndarray, dst: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Batched exact 3-point affine solves, src -> dst, one 2x3 per triangle."""
    t = triangles
    hom = np.concatenate([src[t], np.ones((len(t), 3, 1))], axis=2)  # (T,3,3)
    rhs = dst[t]  # (T,3,2)
    coeff = np.linalg.solve(hom, rhs)  # (T,3,2)
    return np.transpose(coeff, (0, 2, 1))  # (T,2,3)


def fit_piecewise_affine(
    src: LandmarkSet, layout: StandardLayout, tri: Triangulation
) -> PiecewiseAffineMap:
    """Solve the per-triangle affines mapping ``src`` onto the layout."""
    if src.kind != "augmented89":
        raise ValueError("source landmarks must be augmented89")
    areas = _triangle_areas(src.points, tri.triangles)
    if (areas < _DEGENERATE_AREA).any():
        bad = int(np.argmax(areas < _DEGENERATE_AREA))
        raise ValueError(
            f"degenerate source triangle {bad} (area {areas[bad]:.3g} px^2)"
        )
    forward = _solve_affines(src.points, layout.points, tri.triangles)
    inverse = _solve_affines(layout.points, src.points, tri.triangles)
    # The 3-point solve is exact up to round-off; guard against ill conditioning.
    resid = _affine_apply(forward, src.points[tri.triangles]) - layout.points[tri.triangles]
    if np.abs(resid).max() >= 1e-9:
        raise ValueError("affine fit residual exceeds 1e-9 px (ill-conditioned triangle)")
    return PiecewiseAffineMap(forward, inverse, tri)


def _affine_apply(affines: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply (T,2,3) affines to (T,3,2) triangle vertices."""
    hom = np.concatenate([pts, np.ones(pts.shape[:2] + (1,))], axis=2)  # (T,3,3)
    return np.einsum("tij,tkj->tki", affines, hom)


def rasterize_triangles(layout: StandardLayout, tri: Triangulation) -> np.ndarray:
    """Assign every canonical pixel center its containing triangle index.

    Triangles are visited in ascending index order and only unassigned
    pixels are written, so pixels on shared edges belong to the
    lowest-index triangle. Containment is boundary-inclusive.
    """
    w, h = layout.width, layout.height
    assign = np.full((h, w), -1, dtype=np.int32)
    pts = layout.points
    for t_idx, (ia, ib, ic) in enumerate(tri.triangles):
        a, b, c = pts[ia], pts[ib], pts[ic]
        x0 = max(0, int(math.floor(min(a[0], b[0], c[0]))))
        x1 = min(w - 1, int(math.ceil(max(a[0], b[0], c[0]))))
        y0 = max(0, int(math.floor(min(a[1], b[1], c[1]))))
        y1 = min(h - 1, int(math.ceil(max(a[1], b[1], c[1]))))
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        denom = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        u = ((b[1] - c[1]) * (gx - c[0]) + (c[0] - b[0]) * (gy - c[1])) / denom
        v = ((c[1] - a[1]) * (gx - c[0]) + (a[0] - c[0]) * (gy - c[1])) / denom
        wbar = 1.0 - u - v
        eps = 1e-9
        inside = (u >= -eps) & (v >= -eps) & (wbar >= -eps)
        block = assign[y0:y1 + 1, x0:x1 + 1]
        block[inside & (block == -1)] = t_idx
    if (assign < 0).any():
        n = int((assign < 0).sum())
        raise ValueError(f"triangulation does not tile the canonical frame ({n} uncovered pixels)")
    return assign


def _bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = img.shape
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def warp_to_standard(
    img: np.ndarray,
    pmap: PiecewiseAffineMap,
    layout: StandardLayout,
    src_size: tuple[int, int],
    pixel_triangles: np.ndarray | None = None,
    interpolation: str = "bilinear",
) -> np.ndarray:
    """Backward-warp a source-frame image into the canonical frame.

    ``src_size`` is (width, height) of the source landmark frame and must
    match the image. ``pixel_triangles`` can carry a precomputed
    rasterize_triangles() result to amortize it across many warps.
    """
    img = np.asarray(img, dtype=np.float64)
    sw, sh = src_size
    if img.shape != (sh, sw):
        raise ValueError(f"image shape {img.shape} does not match source frame {sh}x{sw}")
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if pixel_triangles is None:
        pixel_triangles = rasterize_triangles(layout, pmap.triangulation)
    h, w = layout.height, layout.width
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    aff = pmap.inverse[pixel_triangles]  # (H,W,2,3)
    sx = aff[..., 0, 0] * gx + aff[..., 0, 1] * gy + aff[..., 0, 2]
    sy = aff[..., 1, 0] * gx + aff[..., 1, 1] * gy + aff[..., 1, 2]
    if interpolation == "nearest":
        xi = np.clip(np.floor(sx + 0.5), 0, sw - 1).astype(np.intp)
        yi = np.clip(np.floor(sy + 0.5), 0, sh - 1).astype(np.intp)
        out = img[yi, xi]
    else:
        out = _bilinear_sample(img, sx, sy)
    # Bilinear weights are convex, so clamping only removes round-off spill.
    return np.clip(out, img.min(), img.max())


# ---------------------------------------------------------------------------
# File formats

def load_landmarks_csv(path: str | Path, image_width: int, image_height: int) -> LandmarkSet:
    """Read a 68-row "x,y" CSV (no header) as a raw68 landmark set."""
    rows = _read_xy_rows(Path(path).read_text(encoding="utf-8").splitlines(), path)
    if len(rows) != N_RAW:
        raise ValueError(f"{path}: expected {N_RAW} landmark rows, got {len(rows)}")
    return LandmarkSet(np.array(rows), "raw68", image_width, image_height)


def save_landmarks_csv(path: str | Path, lm: LandmarkSet) -> None:
    if lm.kind != "raw68":
        raise ValueError("landmark CSV files hold raw68 sets")
    _write_xy_rows(path, lm.points, header=None)


def load_layout(path: str | Path, resolution: tuple[int, int] | None = None) -> StandardLayout:
    """Read a layout file: "width=<W>" / "height=<H>" header then 89 "x,y" rows.

    If ``resolution`` differs from the stored size, the 68 face points are
    rescaled and the synthetic border points are recomputed from the
    augmentation rule at the new size.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("width=") or not lines[1].startswith("height="):
        raise ValueError(f"{path}: layout file needs 'width=' and 'height=' header lines")
    w = int(lines[0].split("=", 1)[1])
    h = int(lines[1].split("=", 1)[1])
    rows = _read_xy_rows(lines[2:], path)
    if len(rows) != N_AUGMENTED:
        raise ValueError(f"{path}: expected {N_AUGMENTED} layout rows, got {len(rows)}")
    layout = StandardLayout(np.array(rows), w, h)
    if resolution is not None and (resolution[0] != w or resolution[1] != h):
        layout = scale_layout(layout, resolution[0], resolution[1])
    return layout


def save_layout(path: str | Path, layout: StandardLayout) -> None:
    _write_xy_rows(path, layout.points,
                   header=f"width={layout.width}\nheight={layout.height}\n")


def scale_layout(layout: StandardLayout, width: int, height: int) -> StandardLayout:
    """Rescale a layout to a new canonical resolution.

    Face points scale by (new-1)/(old-1) per axis so corners stay corners;
    the 21 synthetic points are re-derived from the augmentation rule, which
    keeps augment_landmarks(face68) == layout89 exact at the new size.
    """
    sx = (width - 1) / (layout.width - 1)
    sy = (height - 1) / (layout.height - 1)
    face = layout.points[:N_RAW] * np.array([sx, sy])
    lm = LandmarkSet(face, "raw68", width, height)
    return StandardLayout(augment_landmarks(lm).points, width, height)


def default_layout(resolution: tuple[int, int] | None = None) -> StandardLayout:
    """The layout shipped with the package (224x224 symmetric frontal face)."""
    path = Path(__file__).parent / "data" / "standard_layout.csv"
    return load_layout(path, resolution)


def _read_xy_rows(lines: list[str], path) -> list[list[float]]:
    rows = []
    for i, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"{path}: row {i + 1} is not 'x,y': {line!r}")
        rows.append([float(parts[0]), float(parts[1])])
    return rows


def _write_xy_rows(path: str | Path, points: np.ndarray, header: str | None) -> None:
    out = [] if header is None else [header]
    for x, y in points:
        # repr round-trips float64 exactly (shortest form)
        out.append(f"{float(x)!r},{float(y)!r}\n")
    Path(path).write_text("".join(out), encoding="utf-8")
