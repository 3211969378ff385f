import numpy as np
import pytest
from scipy import ndimage

from xfg.slic import SuperpixelLabels, load_labels, save_labels, slic

FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def assert_valid_segmentation(sp):
    labels, k = sp.labels, sp.region_count
    assert labels.min() == 0 and labels.max() == k - 1
    assert len(np.unique(labels)) == k  # contiguous ids
    for lab in range(k):
        _, n_comp = ndimage.label(labels == lab, structure=FOUR)
        assert n_comp == 1, f"label {lab} split into {n_comp} components"


def test_single_region():
    img = np.random.default_rng(0).random((16, 16))
    sp = slic(img, k_target=1)
    assert sp.region_count == 1
    assert (sp.labels == 0).all()


def test_constant_image_quadrants():
    img = np.full((64, 64), 0.5)
    sp = slic(img, k_target=4)
    assert sp.region_count == 4
    assert_valid_segmentation(sp)
    # grid init dominates on constant input: near-rectangular quadrants
    n_quarter = 64 * 64 / 4
    for lab in range(4):
        size = (sp.labels == lab).sum()
        assert abs(size - n_quarter) <= 0.10 * n_quarter
    # each quadrant center belongs to a distinct label
    corners = {sp.labels[16, 16], sp.labels[16, 48], sp.labels[48, 16], sp.labels[48, 48]}
    assert len(corners) == 4


def test_two_tone_split_follows_the_edge():
    img = np.full((64, 64), 0.1)
    img[:, 32:] = 0.9
    sp = slic(img, k_target=2)
    assert sp.region_count == 2
    assert_valid_segmentation(sp)
    # boundary within +-2 px of column 32
    left_lab = sp.labels[32, 0]
    right_lab = sp.labels[32, 63]
    assert left_lab != right_lab
    assert (sp.labels[:, :30] == left_lab).all()
    assert (sp.labels[:, 34:] == right_lab).all()


def test_scan_order_relabel():
    img = np.full((64, 64), 0.5)
    sp = slic(img, k_target=4)
    assert sp.labels[0, 0] == 0  # first pixel in scan order has label 0
    firsts = [np.flatnonzero((sp.labels == lab).ravel())[0] for lab in range(4)]
    assert firsts == sorted(firsts)


def test_determinism():
    img = np.random.default_rng(3).random((80, 70))
    a = slic(img, k_target=12)
    b = slic(img, k_target=12)
    assert np.array_equal(a.labels, b.labels)
    assert a.region_count == b.region_count


def test_region_count_in_band_on_textured_image():
    rng = np.random.default_rng(4)
    base = rng.random((8, 8))
    img = np.kron(base, np.ones((14, 14)))  # 112x112 blocky texture
    img = np.clip(img + 0.05 * rng.standard_normal(img.shape), 0, 1)
    sp = slic(img, k_target=30)
    assert_valid_segmentation(sp)
    assert 15 <= sp.region_count <= 60


def test_rejects_bad_inputs():
    img = np.zeros((8, 8))
    with pytest.raises(ValueError):
        slic(np.zeros((0, 8)), k_target=2)
    with pytest.raises(ValueError):
        slic(img, k_target=65)  # > pixel count
    with pytest.raises(ValueError):
        slic(img, k_target=0)
    with pytest.raises(ValueError):
        slic(img, k_target=4, compactness=0.0)


def test_label_map_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(5).random((40, 40))
    sp = slic(img, k_target=6)
    p = tmp_path / "labels.pgm"
    save_labels(p, sp)
    again = load_labels(p)
    assert np.array_equal(again.labels, sp.labels)
    assert again.region_count == sp.region_count


def test_labels_validation():
    with pytest.raises(ValueError):
        SuperpixelLabels(np.array([[0, 2], [0, 1]]), 2)  # label out of range
    with pytest.raises(ValueError):
        SuperpixelLabels(np.array([[0]]), 0)
