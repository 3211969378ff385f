"""Synthetic face corpora with planted ground truth.

Desk-scale stand-ins for expression datasets: each generated face is the
canonical layout under a small scale+shift transform with per-landmark
jitter, rendered with simple photometric features (skin, eyes, brows,
mouth), plus two planted bright patches tied to the face's class — one in
the mouth band, one in the eye band. A "mouth-keyed" oracle family reads
the mouth patches, an "eye-keyed" family reads the eye patches, so the
true attention region of every oracle is known by construction and
end-to-end claims (heatmap location, family clustering) become checkable.

Per-image randomness derives from sha256(master_seed, image_id), so a
corpus is reproducible regardless of generation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from . import pgm
from .expressions import EXPRESSIONS
from .geometry import LandmarkSet, StandardLayout, save_landmarks_csv
from .oracle import RegionSoftmaxOracle, fraction_box_slices


def derive_seed(master_seed: int, image_id: str) -> int:
    """Stable per-image seed; order- and process-independent."""
    digest = hashlib.sha256(f"{master_seed}:{image_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# planted families

@dataclass
class PlantedFamily:
    """A band of the face split into one sub-box per expression class."""

    name: str
    sub_boxes: np.ndarray  # (6, 4) fraction boxes (x0, y0, x1, y1)

    def mask(self, width: int, height: int) -> np.ndarray:
        """Union of the family's sub-boxes as a binary mask."""
        out = np.zeros((height, width), dtype=np.uint8)
        for box in self.sub_boxes:
            sy, sx = fraction_box_slices(box, width, height)
            out[sy, sx] = 1
        return out

    def oracles(self, temperatures=(0.05, 0.08, 0.12)) -> list[RegionSoftmaxOracle]:
        """One oracle per temperature, all keyed to this family's boxes."""
        return [
            RegionSoftmaxOracle(f"{self.name}{i}", self.sub_boxes, t)
            for i, t in enumerate(temperatures)
        ]


def _band_grid(x0, y0, x1, y1) -> np.ndarray:
    """Split a band into a 3x2 grid of class sub-boxes (row-major)."""
    xs = np.linspace(x0, x1, 4)
    ys = np.linspace(y0, y1, 3)
    boxes = []
    for r in range(2):
        for c in range(3):
            boxes.append([xs[c], ys[r], xs[c + 1], ys[r + 1]])
    return np.array(boxes)


def mouth_family() -> PlantedFamily:
    return PlantedFamily("mouth", _band_grid(0.30, 0.67, 0.70, 0.86))


def eye_family() -> PlantedFamily:
    return PlantedFamily("eye", _band_grid(0.23, 0.36, 0.77, 0.50))


# ---------------------------------------------------------------------------
# face rendering

def _fill_hull(img: np.ndarray, points: np.ndarray, value: float) -> None:
    hull = ConvexHull(points)
    eqs = hull.equations
    h, w = img.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    inside = np.ones((h, w), dtype=bool)
    for a, b, c in eqs:
        inside &= a * gx + b * gy + c <= 1e-9
    img[inside] = value


def _fill_ellipse(img, cx, cy, rx, ry, value):
    h, w = img.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    img[((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 <= 1.0] = value


def make_face(
    layout: StandardLayout,
    class_index: int,
    seed: int,
    families: tuple[PlantedFamily, ...] = (),
) -> tuple[np.ndarray, LandmarkSet]:
    """Render one synthetic face and its 68-point landmarks.

    The face is the layout under a random scale in [0.97, 1.03] and shift
    in [-4, 4] px (both axes), with +-1.5 px landmark jitter; the planted
    class patches follow the same scale+shift, so they stay both inside
    their oracle box and aligned to the canonical bands after warping.
    """
    if not 0 <= class_index < len(EXPRESSIONS):
        raise ValueError(f"class index {class_index} out of range")
    rng = np.random.default_rng(seed)
    w, h = layout.width, layout.height
    scale = rng.uniform(0.97, 1.03)
    shift = rng.uniform(-4.0, 4.0, size=2) * min(w, h) / 224.0
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])

    def transform(pts):
        return (pts - center) * scale + center + shift

    base = transform(layout.points[:68])
    jitter = rng.uniform(-1.5, 1.5, size=(68, 2)) * min(w, h) / 224.0
    pts = np.clip(base + jitter, 0.0, [w - 1, h - 1])
    lm = LandmarkSet(pts, "raw68", w, h)

    img = np.full((h, w), 0.12)
    _fill_hull(img, pts, 0.5)
    # coarse deterministic texture so the segmenter sees gradients
    img += 0.04 * np.kron(rng.random((h // 8 + 1, w // 8 + 1)), np.ones((8, 8)))[:h, :w]

    def feature(idx, value, rx_pad=1.0, ry_pad=1.0):
        sel = pts[idx]
        cx, cy = sel[:, 0].mean(), sel[:, 1].mean()
        rx = max(1.5, (sel[:, 0].max() - sel[:, 0].min()) / 2 * rx_pad)
        ry = max(1.5, (sel[:, 1].max() - sel[:, 1].min()) / 2 * ry_pad)
        _fill_ellipse(img, cx, cy, rx, ry, value)

    feature(range(17, 22), 0.25, 1.1, 1.6)   # brows
    feature(range(22, 27), 0.25, 1.1, 1.6)
    feature(range(36, 42), 0.30, 1.1, 1.4)   # eyes
    feature(range(42, 48), 0.30, 1.1, 1.4)
    feature(range(27, 36), 0.42, 0.8, 0.9)   # nose
    feature(range(48, 60), 0.28, 1.05, 1.2)  # mouth

    for family in families:
        x0, y0, x1, y1 = family.sub_boxes[class_index]
        p0 = transform(np.array([[x0 * w, y0 * h]]))[0]
        p1 = transform(np.array([[x1 * w, y1 * h]]))[0]
        sy = slice(max(0, int(round(p0[1]))), min(h, int(round(p1[1]))))
        sx = slice(max(0, int(round(p0[0]))), min(w, int(round(p1[0]))))
        img[sy, sx] = 0.95
    return np.clip(img, 0.0, 1.0), lm


def make_corpus(
    out_dir,
    layout: StandardLayout,
    n_per_class: int,
    master_seed: int,
    families: tuple[PlantedFamily, ...] = (),
) -> list[tuple[str, str]]:
    """Write PGM images + landmark CSVs; returns (image_id, class_name) pairs.

    Files are named <class>_<index>.pgm / <class>_<index>.csv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for c, cls in enumerate(EXPRESSIONS):
        for i in range(n_per_class):
            image_id = f"{cls}_{i:03d}"
            img, lm = make_face(layout, c, derive_seed(master_seed, image_id), families)
            pgm.write_pgm(out_dir / f"{image_id}.pgm",
                          np.floor(img * 255.0 + 0.5).astype(np.uint8), 255)
            save_landmarks_csv(out_dir / f"{image_id}.csv", lm)
            index.append((image_id, cls))
    return index
