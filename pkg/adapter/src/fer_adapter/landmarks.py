"""68-point landmark estimation for high-contrast face crops.

The detector assumes a single bright face region against a darker
background, which holds for the synthetic and preprocessed crops this
adapter is meant to feed: it thresholds the image, keeps the largest
connected bright component, and fits a fixed 68-point template (iBUG
ordering: jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, lips 48-67) into
that component's bounding box.  Images without enough contrast or without
a sufficiently large bright region produce a warning and no CSV; they are
not an error.

Landmark CSV format: one "x,y" pair per line, 68 lines, pixel coordinates
with the origin at the top-left corner of the image.
"""

from __future__ import annotations

import sys
from collections import deque
from pathlib import Path

import numpy as np

N_LANDMARKS = 68

# Minimum peak-to-peak intensity for an image to contain anything at all.
MIN_CONTRAST = 0.05
# Minimum fraction of the image the face component must cover.
MIN_AREA_FRACTION = 0.02


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM file as float64 in [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ValueError(f"{path}: malformed PGM header")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid PGM dimensions")
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    count = width * height
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raster.size != count:
        raise ValueError(f"{path}: truncated PGM raster")
    return raster.reshape(height, width).astype(np.float64) / maxval


def _otsu_threshold(image: np.ndarray) -> float:
    """Between-class-variance threshold over a 256-bin histogram."""
    bins = np.clip((image * 255.0).astype(int), 0, 255)
    hist = np.bincount(bins.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    centers = np.arange(256, dtype=np.float64)
    weight0 = np.cumsum(hist)
    weight1 = total - weight0
    sum0 = np.cumsum(hist * centers)
    mean_all = sum0[-1]
    best_var = -1.0
    best_t = 0
    for t in range(256):
        w0, w1 = weight0[t], weight1[t]
        if w0 == 0.0 or w1 == 0.0:
            continue
        mu0 = sum0[t] / w0
        mu1 = (mean_all - sum0[t]) / w1
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var = var
            best_t = t
    return (best_t + 0.5) / 255.0


def _largest_component(mask: np.ndarray) -> np.ndarray | None:
    """Largest 4-connected True region of a boolean mask, or None if empty."""
    height, width = mask.shape
    labels = np.zeros((height, width), dtype=np.int32)
    best_label = 0
    best_size = 0
    next_label = 0
    for sy, sx in zip(*np.nonzero(mask)):
        if labels[sy, sx]:
            continue
        next_label += 1
        size = 0
        queue = deque([(sy, sx)])
        labels[sy, sx] = next_label
        while queue:
            y, x = queue.popleft()
            size += 1
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < height and 0 <= nx < width:
                    if mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = next_label
                        queue.append((ny, nx))
        if size > best_size:
            best_size = size
            best_label = next_label
    if best_label == 0:
        return None
    return labels == best_label


def detect_face_box(image: np.ndarray) -> tuple[float, float, float, float] | None:
    """Bounding box (x0, y0, x1, y1) of the dominant bright region, or None.

    None means "no face": the image is essentially flat, or the brightest
    connected region is too small to be a face crop.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("landmark input must be a non-empty 2-d image")
    if float(img.max() - img.min()) < MIN_CONTRAST:
        return None
    component = _largest_component(img > _otsu_threshold(img))
    if component is None or component.sum() < MIN_AREA_FRACTION * img.size:
        return None
    ys, xs = np.nonzero(component)
    return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())


def template_points() -> np.ndarray:
    """The 68-point template as (x, y) fractions of a face bounding box."""
    pts = np.zeros((N_LANDMARKS, 2))
    # Jaw line 0-16: half ellipse from left temple over the chin.
    t = np.linspace(0.0, np.pi, 17)
    pts[0:17, 0] = 0.5 - 0.48 * np.cos(t)
    pts[0:17, 1] = 0.18 + 0.78 * np.sin(t)
    # Brows 17-21 (image left) and 22-26 (image right), gentle arcs.
    arc = 0.05 * np.sin(np.linspace(0.0, np.pi, 5))
    pts[17:22, 0] = np.linspace(0.16, 0.42, 5)
    pts[17:22, 1] = 0.24 - arc
    pts[22:27, 0] = np.linspace(0.58, 0.84, 5)
    pts[22:27, 1] = 0.24 - arc
    # Nose bridge 27-30 and nostril line 31-35.
    pts[27:31, 0] = 0.5
    pts[27:31, 1] = np.linspace(0.32, 0.52, 4)
    pts[31:36, 0] = np.linspace(0.40, 0.60, 5)
    pts[31:36, 1] = 0.60 + 0.02 * np.sin(np.linspace(0.0, np.pi, 5))
    # Eyes 36-41 and 42-47: six points per hexagonal outline, starting at
    # the outer corner and walking over the upper lid first.
    for base, cx in ((36, 0.30), (42, 0.70)):
        rx, ry, cy = 0.08, 0.035, 0.34
        hexagon = [
            (cx - rx, cy),
            (cx - rx / 2, cy - ry),
            (cx + rx / 2, cy - ry),
            (cx + rx, cy),
            (cx + rx / 2, cy + ry),
            (cx - rx / 2, cy + ry),
        ]
        if base == 42:  # outer corner of the right eye is on the image right
            hexagon = [
                (cx + rx, cy),
                (cx + rx / 2, cy - ry),
                (cx - rx / 2, cy - ry),
                (cx - rx, cy),
                (cx - rx / 2, cy + ry),
                (cx + rx / 2, cy + ry),
            ]
        pts[base : base + 6] = hexagon
    # Lips: outer ring 48-59 (12 points) and inner ring 60-67 (8 points),
    # counter-clockwise from the left corner with y pointing down.
    cy = 0.76
    angles12 = np.deg2rad(np.arange(180.0, -180.0, -30.0))
    pts[48:60, 0] = 0.5 + 0.16 * np.cos(angles12)
    pts[48:60, 1] = cy - 0.07 * np.sin(angles12)
    angles8 = np.deg2rad(np.arange(180.0, -180.0, -45.0))
    pts[60:68, 0] = 0.5 + 0.10 * np.cos(angles8)
    pts[60:68, 1] = cy - 0.03 * np.sin(angles8)
    return pts


def place_landmarks(
    box: tuple[float, float, float, float], shape: tuple[int, int]
) -> np.ndarray:
    """Scale the template into a bounding box, clamped to image bounds."""
    x0, y0, x1, y1 = box
    height, width = shape
    pts = template_points().copy()
    pts[:, 0] = x0 + pts[:, 0] * (x1 - x0)
    pts[:, 1] = y0 + pts[:, 1] * (y1 - y0)
    pts[:, 0] = np.clip(pts[:, 0], 0.0, width - 1.0)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, height - 1.0)
    return pts


def write_landmarks_csv(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise ValueError(f"expected ({N_LANDMARKS}, 2) points, got {pts.shape}")
    lines = [f"{float(x)!r},{float(y)!r}" for x, y in pts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def extract_landmarks(
    directory, overwrite: bool = False, stderr=None
) -> tuple[int, int, int]:
    """Write <image>.csv next to every face found in a directory of PGMs.

    Returns (written, skipped_no_face, skipped_existing).  Unreadable
    images raise; absence of a face does not.
    """
    if stderr is None:
        stderr = sys.stderr
    root = Path(directory)
    images = sorted(root.glob("*.pgm"))
    if not images:
        raise ValueError(f"no PGM images found in {root}")
    written = skipped_no_face = skipped_existing = 0
    for image_path in images:
        csv_path = image_path.with_suffix(".csv")
        if csv_path.exists() and not overwrite:
            skipped_existing += 1
            continue
        image = read_pgm(image_path)
        box = detect_face_box(image)
        if box is None:
            print(f"adapter landmarks: no face found in {image_path.name}", file=stderr)
            skipped_no_face += 1
            continue
        write_landmarks_csv(csv_path, place_landmarks(box, image.shape))
        written += 1
    return written, skipped_no_face, skipped_existing
