"""Otsu binarization and the mask/heatmap comparison measures.

Binary comparisons: IoU = sum(min)/sum(max), Precision = sum(min)/sum(I_p),
Recall = sum(min)/sum(I_gt), F1 = 2PR/(P+R). For binary masks F1 equals
2*IoU/(1+IoU) (the Dice identity). Undefined cases (empty denominator) are
flagged as None, never silently coerced to 0 or 1.

Heatmap similarity: normalized correlation <H1,H2>/sqrt(<H1,H1><H2,H2>)
and its distance 1 - corr.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expressions import EXPRESSIONS

N_BINS = 256


@dataclass
class MetricsRecord:
    iou: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    def as_tuple(self):
        return (self.iou, self.precision, self.recall, self.f1)


def _check_binary(mask, name):
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1")
    return mask.astype(np.int64)


def otsu_threshold(img: np.ndarray) -> float:
    """Histogram threshold maximizing between-class variance.

    256 bins, bin(v) = floor(v*255) (capped at 255); the returned value is
    the upper edge of the chosen low-class bin, (t+1)/255, capped at 1.
    Only splits with a non-empty low class are considered; ties take the
    lowest bin. A constant image therefore thresholds at its own bin's
    upper edge, and strict-greater binarization yields an empty mask.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("cannot threshold an empty image")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    bins = np.minimum(np.floor(img * 255.0).astype(np.int64), 255)
    hist = np.bincount(bins.ravel(), minlength=N_BINS).astype(np.float64)
    p = hist / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(N_BINS))
    mu_total = mu[-1]
    sigma = np.zeros(N_BINS)
    w1 = 1.0 - omega
    interior = (omega > 0) & (w1 > 1e-15)
    sigma[interior] = (mu_total * omega[interior] - mu[interior]) ** 2 / (
        omega[interior] * w1[interior]
    )
    candidates = np.flatnonzero(omega > 0)
    t = int(candidates[np.argmax(sigma[candidates])])  # argmax: lowest on ties
    return min(1.0, (t + 1) / 255.0)


def binarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Strictly-greater thresholding to a {0,1} uint8 mask."""
    return (np.asarray(img, dtype=np.float64) > threshold).astype(np.uint8)


def compare(i_gt: np.ndarray, i_p: np.ndarray) -> MetricsRecord:
    """All four binary measures of a predicted mask against ground truth."""
    gt = _check_binary(i_gt, "I_gt")
    pred = _check_binary(i_p, "I_p")
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    inter = int(np.minimum(gt, pred).sum())
    union = int(np.maximum(gt, pred).sum())
    n_gt = int(gt.sum())
    n_p = int(pred.sum())
    iou = inter / union if union > 0 else None
    precision = inter / n_p if n_p > 0 else None
    recall = inter / n_gt if n_gt > 0 else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricsRecord(iou, precision, recall, f1)


def normalized_correlation(h1: np.ndarray, h2: np.ndarray) -> float | None:
    """<H1,H2>/sqrt(<H1,H1><H2,H2>); None when either image is all zero."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ValueError(f"image shapes differ: {h1.shape} vs {h2.shape}")
    if h1.size == 0:
        raise ValueError("empty images")
    if h1.min() < 0 or h2.min() < 0:
        raise ValueError("correlation is defined for non-negative images")
    n11 = float((h1 * h1).sum())
    n22 = float((h2 * h2).sum())
    if n11 == 0.0 or n22 == 0.0:
        return None
    corr = float((h1 * h2).sum()) / np.sqrt(n11 * n22)
    return min(1.0, corr)  # shave round-off above 1


def correlation_distance(h1: np.ndarray, h2: np.ndarray) -> float | None:
    corr = normalized_correlation(h1, h2)
    return None if corr is None else 1.0 - corr


# ---------------------------------------------------------------------------
# CSV table

CSV_COLUMNS = ("model", "expression", "iou", "precision", "recall", "f1")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _mean_defined(values):
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def _average_record(records) -> MetricsRecord:
    return MetricsRecord(*[
        _mean_defined([r.as_tuple()[i] for r in records]) for i in range(4)
    ])


def write_metrics_csv(path, table: dict[tuple[str, str], MetricsRecord]) -> None:
    """Long-format table with per-model average rows and a per-expression
    average block, mirroring the usual models x expressions summary shape.

    ``table`` maps (model, expression) -> record. Undefined metrics are
    left as empty cells.
    """
    models = sorted({m for m, _ in table})
    rows = []
    for model in models:
        per_expr = []
        for expr in EXPRESSIONS:
            rec = table.get((model, expr))
            if rec is None:
                continue
            per_expr.append(rec)
            rows.append((model, expr, *rec.as_tuple()))
        if per_expr:
            rows.append((model, "average", *_average_record(per_expr).as_tuple()))
    for expr in EXPRESSIONS:
        col = [table[(m, expr)] for m in models if (m, expr) in table]
        if col:
            rows.append(("average", expr, *_average_record(col).as_tuple()))
    all_recs = list(table.values())
    if all_recs:
        rows.append(("average", "average", *_average_record(all_recs).as_tuple()))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for model, expr, *vals in rows:
            writer.writerow([model, expr, *[_fmt(v) for v in vals]])


def read_metrics_csv(path) -> dict[tuple[str, str], MetricsRecord]:
    """Inverse of write_metrics_csv, skipping the average rows."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        for row in reader:
            model, expr, *vals = row
            if model == "average" or expr == "average":
                continue
            out[(model, expr)] = MetricsRecord(
                *[None if v == "" else float(v) for v in vals]
            )
    return out
