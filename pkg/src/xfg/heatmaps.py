"""Pixel-wise averaging of standardized relevance images into heatmaps.

Three grouping levels: per (model, fold, class), per (model, class), and
per class. Groups are flat unions of their member images, so folds of
unequal size weight by member count. Accumulation runs in extended
precision over members sorted by a canonical key, which makes the result
bit-identical under manifest shuffling and any worker layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pgm
from .expressions import expression_index

LEVELS = ("per_fold", "per_model", "global")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    model: str
    fold: str
    class_name: str
    image_id: str

    def __post_init__(self):
        expression_index(self.class_name)  # unknown class -> ValueError

    def sort_key(self):
        return (self.model, self.fold, self.class_name, self.image_id, self.path)


@dataclass
class Heatmap:
    pixels: np.ndarray  # (H, W) float64 in [0, 1]
    group: dict  # subset of {"model", "fold", "class"}; always has "class"
    support: int

    def __post_init__(self):
        if self.support < 1:
            raise ValueError("support must be >= 1")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("heatmap values must lie in [0, 1]")


def aggregate(images, group: dict | None = None) -> Heatmap:
    """Arithmetic mean of equal-shaped [0,1] images, in the given order."""
    images = list(images)
    if not images:
        raise ValueError("cannot aggregate an empty set of images")
    first = np.asarray(images[0], dtype=np.float64)
    acc = np.zeros(first.shape, dtype=np.longdouble)
    for im in images:
        im = np.asarray(im, dtype=np.float64)
        if im.shape != first.shape:
            raise ValueError(f"image shape {im.shape} differs from {first.shape}")
        if im.min() < 0 or im.max() > 1:
            raise ValueError("relevance values must lie in [0, 1]")
        acc += im
    mean = (acc / len(images)).astype(np.float64)
    return Heatmap(np.clip(mean, 0.0, 1.0), group or {"class": "unknown"}, len(images))


def validate_manifest(entries: list[ManifestEntry]) -> None:
    seen = set()
    for e in entries:
        key = (e.model, e.fold, e.class_name, e.image_id)
        if key in seen:
            raise ValueError(f"duplicate manifest key {key}")
        seen.add(key)


def group_entries(entries: list[ManifestEntry], level: str) -> dict[tuple, list[ManifestEntry]]:
    """Group keys -> members (members in canonical sorted order)."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    validate_manifest(entries)
    groups: dict[tuple, list[ManifestEntry]] = {}
    for e in entries:
        if level == "per_fold":
            key = (e.model, e.fold, e.class_name)
        elif level == "per_model":
            key = (e.model, e.class_name)
        else:
            key = (e.class_name,)
        groups.setdefault(key, []).append(e)
    for members in groups.values():
        members.sort(key=ManifestEntry.sort_key)
    return dict(sorted(groups.items()))


def _group_dict(level: str, key: tuple) -> dict:
    if level == "per_fold":
        return {"model": key[0], "fold": key[1], "class": key[2]}
    if level == "per_model":
        return {"model": key[0], "class": key[1]}
    return {"class": key[0]}


def group_and_aggregate(entries, level: str, loader=None) -> list[Heatmap]:
    """One heatmap per group at the requested level, in sorted key order.

    ``loader`` maps an entry to its relevance image; the default reads the
    entry path as 16-bit PGM. All images must share one resolution.
    """
    if loader is None:
        loader = lambda e: pgm.read_relevance(e.path)
    groups = group_entries(list(entries), level)
    if not groups:
        raise ValueError("empty manifest")
    out = []
    shape = None
    for key, members in groups.items():
        images = []
        for e in members:
            im = np.asarray(loader(e), dtype=np.float64)
            if shape is None:
                shape = im.shape
            elif im.shape != shape:
                raise ValueError(
                    f"{e.path}: resolution {im.shape} differs from {shape}"
                )
            images.append(im)
        out.append(aggregate(images, _group_dict(level, key)))
    return out


# ---------------------------------------------------------------------------
# file formats

def load_manifest(path) -> list[ManifestEntry]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ValueError(f"{path}: entry {i} is not an object")
        missing = {"path", "model", "fold", "class", "image_id"} - set(item)
        if missing:
            raise ValueError(f"{path}: entry {i} missing fields {sorted(missing)}")
        entries.append(
            ManifestEntry(
                path=str(item["path"]),
                model=str(item["model"]),
                fold=str(item["fold"]),
                class_name=str(item["class"]),
                image_id=str(item["image_id"]),
            )
        )
    validate_manifest(entries)
    return entries


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    raw = [
        {"path": e.path, "model": e.model, "fold": e.fold,
         "class": e.class_name, "image_id": e.image_id}
        for e in entries
    ]
    Path(path).write_text(json.dumps(raw, indent=1) + "\n", encoding="utf-8")


def save_heatmap(path, hm: Heatmap, extra: dict | None = None) -> None:
    """Write pixels as 16-bit PGM plus a '<path>.json' sidecar."""
    path = Path(path)
    pgm.write_relevance(path, hm.pixels)
    sidecar = {"group": hm.group, "support": hm.support}
    if extra:
        sidecar.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_heatmap(path) -> Heatmap:
    path = Path(path)
    pixels = pgm.read_relevance(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    return Heatmap(pixels, meta["group"], int(meta["support"]))
