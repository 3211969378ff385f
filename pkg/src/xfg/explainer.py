"""Perturbation-based relevance explanations over superpixels.

For one face image: toggle superpixels off (to black), query the oracle on
each perturbed image, weight samples by proximity to the intact image, fit
a weighted ridge surrogate, and paint the positive coefficients back over
the superpixels as a relevance image in [0, 1] for the predicted class.

The first sample is always the all-ones anchor (the intact image); the
rest are i.i.d. uniform over {0,1}^S from a seeded generator, so a fixed
(image, oracle, seed) triple reproduces bit-identical relevance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .slic import SuperpixelLabels

DEFAULT_SAMPLES = 1000
DEFAULT_RIDGE = 1.0
DEFAULT_SIGMA = 0.25
_POSITIVE_EPS = 1e-12  # solver round-off must not count as positive evidence


@dataclass
class PerturbationSample:
    z: np.ndarray  # (S,) binary
    prob: float  # oracle probability of the explained class
    weight: float  # locality kernel value

    def __post_init__(self):
        self.z = np.asarray(self.z)
        if self.z.ndim != 1 or not np.isin(self.z, (0, 1)).all():
            raise ValueError("z must be a binary vector")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob {self.prob} outside [0, 1]")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight {self.weight} outside (0, 1]")


@dataclass
class Explanation:
    coefficients: np.ndarray  # (S,) surrogate weights, unclamped
    intercept: float
    explained_class: int
    relevance: np.ndarray  # (H, W) in [0, 1], piecewise-constant over superpixels

    def __post_init__(self):
        if self.relevance.size and (self.relevance.min() < 0 or self.relevance.max() > 1):
            raise ValueError("relevance must lie in [0, 1]")


def perturb(img: np.ndarray, labels: SuperpixelLabels, z) -> np.ndarray:
    """Copy of img with the superpixels where z_s = 0 blacked out."""
    img = np.asarray(img, dtype=np.float64)
    z = np.asarray(z)
    if z.shape != (labels.region_count,):
        raise ValueError(f"z has {z.shape} entries for {labels.region_count} regions")
    if img.shape != labels.labels.shape:
        raise ValueError("image and label map shapes differ")
    return img * z.astype(np.float64)[labels.labels]


def sample_perturbations(s: int, n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> np.ndarray:
    """(n, S) binary matrix; row 0 is the all-ones anchor."""
    if s < 1:
        raise ValueError("need at least one superpixel")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    z = np.empty((n_samples, s), dtype=np.uint8)
    z[0] = 1
    if n_samples > 1:
        z[1:] = rng.integers(0, 2, size=(n_samples - 1, s), dtype=np.uint8)
    return z


def kernel_weight(z, sigma: float = DEFAULT_SIGMA) -> float:
    """exp(-d^2/sigma^2) with d the cosine distance of z to the all-ones
    vector: d = 1 - sqrt(k/S) for k ones out of S."""
    z = np.asarray(z)
    if z.ndim != 1 or z.size < 1:
        raise ValueError("z must be a non-empty vector")
    return float(_kernel_from_counts(np.array([z.sum()]), z.size, sigma)[0])


def _kernel_from_counts(k: np.ndarray, s: int, sigma: float) -> np.ndarray:
    d = 1.0 - np.sqrt(k / s)
    return np.exp(-(d**2) / sigma**2)


def fit_surrogate(samples, ridge: float = DEFAULT_RIDGE) -> tuple[np.ndarray, float]:
    """Weighted ridge fit of prob ~ beta0 + beta . z over the samples.

    Minimizes sum_i w_i (prob_i - beta0 - beta.z_i)^2 + ridge * ||beta||^2
    (the intercept is not penalized) by a direct solve of the
    (S+1) x (S+1) normal equations. Returns (beta, beta0).
    """
    samples = list(samples)
    z = np.stack([np.asarray(s.z, dtype=np.float64) for s in samples])
    y = np.array([s.prob for s in samples])
    w = np.array([s.weight for s in samples])
    return _fit_arrays(z, y, w, ridge)


def _fit_arrays(z, y, w, ridge):
    n, s = z.shape
    if n < s + 1:
        raise ValueError(f"need at least S+1={s + 1} samples, got {n}")
    if (w <= 0).any():
        raise ValueError("weights must be positive")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    x = np.concatenate([np.ones((n, 1)), z], axis=1)
    xtw = x.T * w
    lhs = xtw @ x
    lhs[1:, 1:] += ridge * np.eye(s)
    rhs = xtw @ y
    try:
        beta = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular normal equations (degenerate samples at ridge={ridge})") from exc
    return beta[1:], float(beta[0])


def explain(
    img: np.ndarray,
    oracle,
    labels: SuperpixelLabels,
    seed: int,
    n_samples: int = DEFAULT_SAMPLES,
    ridge: float = DEFAULT_RIDGE,
    sigma: float = DEFAULT_SIGMA,
    batch: int = 128,
) -> Explanation:
    """Explain the oracle's predicted class for img.

    Relevance = positive part of the coefficients, scaled so the best
    superpixel is exactly 1, painted over the label map; all-zero when no
    coefficient is positive.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.shape != labels.labels.shape:
        raise ValueError("image and label map shapes differ")
    s = labels.region_count
    z_mat = sample_perturbations(s, n_samples, seed)
    anchor = oracle.classify(img)  # z row 0 is all ones: the intact image
    c = anchor.predicted
    probs = np.empty(n_samples)
    probs[0] = anchor.probs[c]
    flat = labels.labels.ravel()
    h, w = img.shape
    for start in range(1, n_samples, batch):
        chunk = z_mat[start:start + batch]
        masks = chunk.astype(np.float64)[:, flat].reshape(len(chunk), h, w)
        recs = oracle.classify_batch(img[None] * masks)
        probs[start:start + len(chunk)] = [r.probs[c] for r in recs]
    weights = _kernel_from_counts(z_mat.sum(axis=1), s, sigma)
    coeffs, intercept = _fit_arrays(z_mat.astype(np.float64), probs, weights, ridge)
    pos = np.clip(coeffs, 0.0, None)
    top = pos.max()
    rel_per_sp = pos / top if top > _POSITIVE_EPS else np.zeros(s)
    relevance = rel_per_sp[labels.labels]
    return Explanation(coeffs, intercept, c, relevance)
