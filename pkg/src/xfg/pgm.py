"""Binary PGM (P5) reading and writing.

Relevance images and heatmaps are persisted as 16-bit PGM with values
scaled by 65535; Ekman masks as 8-bit PGM with 0/255; superpixel label
maps as 16-bit PGM holding raw label ids.  16-bit samples are big-endian
per the netpbm format.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, data: np.ndarray, maxval: int = 65535) -> None:
    """Write a 2-D integer array as binary PGM.

    ``data`` must already be integer-valued in [0, maxval].
    """
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"PGM data must be 2-D, got shape {arr.shape}")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    if arr.min() < 0 or arr.max() > maxval:
        raise ValueError("PGM sample out of range")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    if maxval == 255:
        payload = arr.astype(np.uint8).tobytes()
    else:
        payload = arr.astype(">u2").tobytes()
    Path(path).write_bytes(header + payload)


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (array, maxval)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5)")
    # Header: magic, width, height, maxval, separated by whitespace/comments.
    pos = 2
    fields = []
    while len(fields) < 3:
        m = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\d+)").match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PGM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = fields
    pos += 1  # single whitespace byte after maxval
    if maxval == 255:
        arr = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    elif maxval == 65535:
        arr = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos)
    else:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return arr.reshape(h, w).copy(), maxval


def write_relevance(path: str | Path, img: np.ndarray) -> None:
    """Persist a [0,1] grayscale image as 16-bit PGM (value = round(v*65535))."""
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("relevance values must lie in [0,1]")
    write_pgm(path, np.floor(img * 65535.0 + 0.5).astype(np.uint16), maxval=65535)


def read_relevance(path: str | Path) -> np.ndarray:
    """Load a 16-bit PGM back into a [0,1] float image."""
    arr, maxval = read_pgm(path)
    return arr.astype(np.float64) / float(maxval)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Persist a {0,1} binary mask as 8-bit PGM (0/255)."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    write_pgm(path, mask.astype(np.uint8) * 255, maxval=255)


def read_mask(path: str | Path) -> np.ndarray:
    arr, _ = read_pgm(path)
    return (arr > 0).astype(np.uint8)
