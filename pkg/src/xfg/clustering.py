"""Correlation-distance matrices over heatmaps and agglomerative trees.

Distances are 1 - normalized correlation, so identical maps sit at 0 and
disjoint-support maps at 1. Merging is classic agglomerative clustering:
at each step the closest pair of clusters joins; equal distances are broken
lexicographically on each cluster's smallest member label, making the tree
deterministic. Average linkage (support-weighted UPGMA) is the default;
single and complete are available behind a flag.

Node ids follow the usual convention: leaves are 0..n-1 in input order,
the merge at step t creates node n+t.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import correlation_distance

LINKAGES = ("average", "single", "complete")
_SYM_TOL = 1e-12


@dataclass
class DistanceMatrix:
    labels: list[str]
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        n = len(self.labels)
        if len(set(self.labels)) != n:
            raise ValueError("duplicate labels")
        if self.d.shape != (n, n):
            raise ValueError(f"matrix shape {self.d.shape} does not match {n} labels")
        if np.isnan(self.d).any():
            raise ValueError("NaN distances")
        if (np.abs(np.diag(self.d)) > 0).any():
            raise ValueError("diagonal must be zero")
        if np.abs(self.d - self.d.T).max() > _SYM_TOL:
            raise ValueError("matrix is not symmetric")
        if self.d.min() < 0 or self.d.max() > 1:
            raise ValueError("distances must lie in [0, 1]")


@dataclass
class Merge:
    a: int  # node id, always < b
    b: int
    height: float


@dataclass
class Dendrogram:
    labels: list[str]
    merges: list[Merge]

    def __post_init__(self):
        if len(self.merges) != len(self.labels) - 1:
            raise ValueError(
                f"{len(self.labels)} leaves need {len(self.labels) - 1} merges, "
                f"got {len(self.merges)}"
            )

    def leaf_sets(self) -> list[frozenset]:
        """Leaf-label set under every node, indexed by node id."""
        sets = [frozenset([lab]) for lab in self.labels]
        for m in self.merges:
            sets.append(sets[m.a] | sets[m.b])
        return sets

    def root_split(self) -> tuple[frozenset, frozenset]:
        """The two leaf-label sets separated by cutting below the root."""
        sets = self.leaf_sets()
        root = self.merges[-1]
        return sets[root.a], sets[root.b]


def distance_matrix(items) -> DistanceMatrix:
    """Pairwise correlation distances over labeled heatmaps.

    ``items``: sequence of (label, image). Needs >= 2 images of equal
    shape, none identically zero.
    """
    items = list(items)
    if len(items) < 2:
        raise ValueError("need at least two heatmaps")
    labels = [lab for lab, _ in items]
    imgs = [np.asarray(im, dtype=np.float64) for _, im in items]
    n = len(imgs)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist = correlation_distance(imgs[i], imgs[j])
            if dist is None:
                zero = labels[i] if not imgs[i].any() else labels[j]
                raise ValueError(f"heatmap {zero!r} is identically zero")
            d[i, j] = d[j, i] = min(1.0, max(0.0, dist))
    return DistanceMatrix(labels, d)


def agglomerate(dm: DistanceMatrix, linkage: str = "average") -> Dendrogram:
    """Merge the closest pair until one cluster remains.

    Average linkage uses the support-weighted mean:
    d(A+B, C) = (|A| d(A,C) + |B| d(B,C)) / (|A| + |B|).
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}, got {linkage!r}")
    n = len(dm.labels)
    if n < 2:
        raise ValueError("need at least two items to cluster")
    # active clusters: node id -> (representative label, size)
    rep = {i: dm.labels[i] for i in range(n)}
    size = {i: 1 for i in range(n)}
    dist = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = dm.d[i, j]
    merges = []
    next_id = n
    last_height = 0.0
    while len(rep) > 1:
        best_pair, best_d, best_key = None, np.inf, None
        for (i, j), dij in dist.items():
            key = tuple(sorted((rep[i], rep[j])))
            if best_pair is None or dij < best_d or (dij == best_d and key < best_key):
                best_pair, best_d, best_key = (i, j), dij, key
        i, j = best_pair
        if best_d < last_height - _SYM_TOL:
            raise ValueError("merge-height inversion (non-reducible linkage?)")
        last_height = max(last_height, best_d)
        new = next_id
        next_id += 1
        for k in list(rep):
            if k in (i, j):
                continue
            dik = dist.pop((min(i, k), max(i, k)))
            djk = dist.pop((min(j, k), max(j, k)))
            if linkage == "average":
                dnew = (size[i] * dik + size[j] * djk) / (size[i] + size[j])
            elif linkage == "single":
                dnew = min(dik, djk)
            else:
                dnew = max(dik, djk)
            dist[(k, new) if k < new else (new, k)] = dnew
        dist.pop((i, j))
        rep[new] = min(rep[i], rep[j])
        size[new] = size[i] + size[j]
        for k in (i, j):
            del rep[k], size[k]
        merges.append(Merge(min(i, j), max(i, j), float(best_d)))
    return Dendrogram(dm.labels, merges)


# ---------------------------------------------------------------------------
# serialization

def to_newick(dendro: Dendrogram) -> str:
    """Newick text with branch lengths = parent height - child height."""
    n = len(dendro.labels)
    heights = [0.0] * n + [m.height for m in dendro.merges]

    def node_text(node_id: int, parent_h: float) -> str:
        blen = parent_h - heights[node_id]
        if node_id < n:
            return f"{_escape(dendro.labels[node_id])}:{blen:.12g}"
        m = dendro.merges[node_id - n]
        inner = f"({node_text(m.a, m.height)},{node_text(m.b, m.height)})"
        return f"{inner}:{blen:.12g}"

    root = dendro.merges[-1]
    h = root.height
    return f"({node_text(root.a, h)},{node_text(root.b, h)});"


def _escape(label: str) -> str:
    if any(ch in label for ch in "(),:;' \t"):
        return "'" + label.replace("'", "''") + "'"
    return label


def save_dendrogram_json(path, dendro: Dendrogram) -> None:
    """Bare merge list [{"merge": [a, b], "height": h}, ...]."""
    raw = [{"merge": [m.a, m.b], "height": m.height} for m in dendro.merges]
    Path(path).write_text(json.dumps(raw, indent=1) + "\n", encoding="utf-8")


def load_dendrogram_json(path, labels: list[str]) -> Dendrogram:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    merges = [Merge(int(m["merge"][0]), int(m["merge"][1]), float(m["height"])) for m in raw]
    return Dendrogram(labels, merges)
