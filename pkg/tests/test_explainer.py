import math

import numpy as np
import pytest
from scipy import optimize

from xfg.explainer import (
    Explanation,
    PerturbationSample,
    explain,
    fit_surrogate,
    kernel_weight,
    perturb,
    sample_perturbations,
)
from xfg.oracle import ConstantClassOracle, RegionSoftmaxOracle, SyntheticOracle
from xfg.slic import SuperpixelLabels


def grid_labels(h, w, ny, nx):
    """Rectangular ny x nx tiling used as a hand-checkable label map."""
    rows = np.minimum(np.arange(h) * ny // h, ny - 1)
    cols = np.minimum(np.arange(w) * nx // w, nx - 1)
    return SuperpixelLabels(rows[:, None] * nx + cols[None, :], ny * nx)


class SingleRegionOracle(SyntheticOracle):
    """Class 0's probability depends only on one region's mean intensity."""

    def __init__(self, identity, region_slice):
        super().__init__(identity)
        self.region_slice = region_slice

    def _probs_batch(self, stack):
        m = stack[:, self.region_slice[0], self.region_slice[1]].mean(axis=(1, 2))
        p0 = 0.1 + 0.8 * m
        probs = np.empty((len(stack), 6))
        probs[:, 0] = p0
        probs[:, 1:] = ((1.0 - p0) / 5.0)[:, None]
        return probs


# ---------------------------------------------------------------------------
# perturb

def test_perturb_all_ones_is_identity():
    img = np.random.default_rng(0).random((12, 12))
    labels = grid_labels(12, 12, 2, 2)
    out = perturb(img, labels, np.ones(4, dtype=int))
    assert np.array_equal(out, img)


def test_perturb_all_zeros_is_black():
    img = np.random.default_rng(1).random((12, 12))
    labels = grid_labels(12, 12, 2, 2)
    assert (perturb(img, labels, np.zeros(4, dtype=int)) == 0).all()


def test_perturb_zeroes_exactly_the_off_region():
    img = np.random.default_rng(2).random((12, 12)) + 0.1
    labels = grid_labels(12, 12, 2, 2)
    z = np.array([0, 1, 1, 1])
    out = perturb(img, labels, z)
    off = labels.labels == 0
    assert (out[off] == 0).all()
    assert np.array_equal(out[~off], img[~off])


def test_perturb_validates_z_length():
    labels = grid_labels(8, 8, 2, 2)
    with pytest.raises(ValueError):
        perturb(np.zeros((8, 8)), labels, np.ones(5, dtype=int))


# ---------------------------------------------------------------------------
# sampling

def test_first_sample_is_anchor():
    z = sample_perturbations(7, 1, seed=3)
    assert z.shape == (1, 7)
    assert (z[0] == 1).all()


def test_sampling_deterministic():
    a = sample_perturbations(10, 50, seed=42)
    b = sample_perturbations(10, 50, seed=42)
    assert np.array_equal(a, b)
    c = sample_perturbations(10, 50, seed=43)
    assert not np.array_equal(a, c)


def test_sampling_on_rate_binomial_band():
    z = sample_perturbations(10, 1000, seed=7)
    rates = z[1:].mean(axis=0)
    assert (rates >= 0.45).all() and (rates <= 0.55).all()


# ---------------------------------------------------------------------------
# kernel

def test_kernel_anchor_weight_is_one():
    assert kernel_weight(np.ones(9)) == 1.0


def test_kernel_all_zeros():
    assert math.isclose(kernel_weight(np.zeros(5)), math.exp(-16.0), rel_tol=1e-12)


def test_kernel_quarter_on():
    # S=4, k=1: d = 1 - 1/2; weight = exp(-0.25 / 0.0625) = exp(-4)
    w = kernel_weight(np.array([1, 0, 0, 0]))
    assert math.isclose(w, math.exp(-4.0), rel_tol=1e-12)


# ---------------------------------------------------------------------------
# surrogate fit

def exhaustive_s2_samples():
    zs = [(0, 0), (0, 1), (1, 0), (1, 1)]
    return [PerturbationSample(np.array(z), float(z[0]), 1.0) for z in zs]


def test_surrogate_recovers_indicator_at_zero_ridge():
    beta, beta0 = fit_surrogate(exhaustive_s2_samples(), ridge=0.0)
    assert np.abs(beta - np.array([1.0, 0.0])).max() < 1e-12
    assert abs(beta0) < 1e-12


def test_surrogate_constant_target():
    zs = [(0, 0), (0, 1), (1, 0), (1, 1)]
    samples = [PerturbationSample(np.array(z), 0.5, 1.0) for z in zs]
    beta, beta0 = fit_surrogate(samples, ridge=1.0)
    assert np.abs(beta).max() < 1e-12
    assert abs(beta0 - 0.5) < 1e-12


def test_surrogate_ridge_one_hand_solved():
    # same 4 points with ridge 1; normal equations reduce to
    # [[4,2,2],[2,3,1],[2,1,3]] beta = (2,2,1) -> beta0=1/4, beta=(1/2, 0)
    beta, beta0 = fit_surrogate(exhaustive_s2_samples(), ridge=1.0)
    assert abs(beta0 - 0.25) < 1e-12
    assert np.abs(beta - np.array([0.5, 0.0])).max() < 1e-12


def test_surrogate_singular_at_zero_ridge():
    samples = [PerturbationSample(np.array([1, 1]), 0.4, 1.0) for _ in range(5)]
    with pytest.raises(ValueError, match="singular"):
        fit_surrogate(samples, ridge=0.0)


def test_surrogate_matches_numerical_minimizer():
    rng = np.random.default_rng(11)
    for trial in range(3):
        n, s, lam = 20, 4, 0.7
        z = rng.integers(0, 2, size=(n, s)).astype(float)
        y = rng.random(n)
        w = rng.uniform(0.1, 1.0, n)
        samples = [PerturbationSample(z[i], y[i], w[i]) for i in range(n)]
        beta, beta0 = fit_surrogate(samples, ridge=lam)

        def objective(p):
            resid = y - p[0] - z @ p[1:]
            return np.sum(w * resid**2) + lam * np.sum(p[1:] ** 2)

        res = optimize.minimize(objective, np.zeros(s + 1), method="BFGS",
                                options={"gtol": 1e-12})
        assert np.abs(np.concatenate([[beta0], beta]) - res.x).max() < 1e-6


def test_sample_validation():
    with pytest.raises(ValueError):
        PerturbationSample(np.array([0, 2]), 0.5, 1.0)
    with pytest.raises(ValueError):
        PerturbationSample(np.array([0, 1]), 1.5, 1.0)
    with pytest.raises(ValueError):
        PerturbationSample(np.array([0, 1]), 0.5, 0.0)


# ---------------------------------------------------------------------------
# explain

def test_explain_constant_oracle_all_zero():
    img = np.random.default_rng(4).random((24, 24))
    labels = grid_labels(24, 24, 3, 3)
    oracle = ConstantClassOracle("const", 2)
    exp = explain(img, oracle, labels, seed=0, n_samples=64)
    assert exp.explained_class == 2
    assert (exp.relevance == 0).all()


def test_explain_deterministic():
    img = np.random.default_rng(5).random((24, 24))
    labels = grid_labels(24, 24, 3, 3)
    boxes = np.tile(np.array([[0.0, 0.0, 1.0, 1.0]]), (6, 1))
    boxes[3] = [0.25, 0.25, 0.75, 0.75]
    oracle = RegionSoftmaxOracle("r", boxes, temperature=0.2)
    a = explain(img, oracle, labels, seed=9, n_samples=128)
    b = explain(img, oracle, labels, seed=9, n_samples=128)
    assert np.array_equal(a.relevance, b.relevance)
    assert np.array_equal(a.coefficients, b.coefficients)


def test_explain_relevance_structure():
    img = np.full((24, 24), 0.8)
    labels = grid_labels(24, 24, 3, 3)
    oracle = SingleRegionOracle("sr", (slice(0, 8), slice(8, 16)))  # region 1
    exp = explain(img, oracle, labels, seed=1, n_samples=200)
    rel = exp.relevance
    assert rel.min() >= 0 and rel.max() == 1.0
    # piecewise constant over superpixels
    for lab in range(labels.region_count):
        vals = rel[labels.labels == lab]
        assert (vals == vals.flat[0]).all()


def test_explain_separable_oracle_top_coefficient():
    # class-0 probability depends only on region 4's presence: its
    # coefficient must dominate, averaged over 5 seeds
    img = np.full((24, 24), 1.0)
    labels = grid_labels(24, 24, 3, 3)
    sy, sx = slice(8, 16), slice(8, 16)  # region index 4 (center)
    oracle = SingleRegionOracle("sep", (sy, sx))
    coef_sum = np.zeros(9)
    for seed in range(5):
        exp = explain(img, oracle, labels, seed=seed, n_samples=1000)
        assert exp.explained_class == 0
        coef_sum += exp.coefficients
    assert int(np.argmax(coef_sum)) == 4


def test_explain_mouth_box_beats_eye_box():
    rng = np.random.default_rng(6)
    h = w = 48
    img = np.clip(rng.normal(0.35, 0.05, (h, w)), 0, 1)
    mouth = (slice(34, 44), slice(14, 34))
    eyes = (slice(10, 18), slice(8, 40))
    img[mouth] += 0.5
    img = np.clip(img, 0, 1)
    boxes = np.tile(np.array([[0.0, 0.0, 0.2, 0.2]]), (6, 1))
    boxes[3] = [14 / w, 34 / h, 34 / w, 44 / h]  # happiness keyed to mouth
    boxes[0] = [0.0, 0.0, 0.25, 0.2]
    boxes[1] = [0.25, 0.0, 0.5, 0.2]
    boxes[2] = [0.5, 0.0, 0.75, 0.2]
    boxes[4] = [0.75, 0.0, 1.0, 0.2]
    boxes[5] = [0.0, 0.8, 0.2, 1.0]
    oracle = RegionSoftmaxOracle("mouth", boxes, temperature=0.05)
    labels = grid_labels(h, w, 6, 6)
    exp = explain(img, oracle, labels, seed=3, n_samples=600)
    assert exp.explained_class == 3
    rel = exp.relevance
    thresh = np.quantile(rel[rel > 0], 0.75) if (rel > 0).any() else 0
    top = rel >= max(thresh, 1e-9)
    mouth_mask = np.zeros((h, w), bool)
    mouth_mask[mouth] = True
    eye_mask = np.zeros((h, w), bool)
    eye_mask[eyes] = True

    def iou(a, b):
        return (a & b).sum() / max((a | b).sum(), 1)

    assert iou(top, mouth_mask) > iou(top, eye_mask)
