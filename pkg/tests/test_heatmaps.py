import json

import numpy as np
import pytest

from xfg.heatmaps import (
    Heatmap,
    ManifestEntry,
    aggregate,
    group_and_aggregate,
    group_entries,
    load_heatmap,
    load_manifest,
    save_heatmap,
    save_manifest,
)


def entry(model="m0", fold="f0", cls="anger", image_id="i0", path=None):
    return ManifestEntry(
        path=path or f"{model}_{fold}_{cls}_{image_id}.pgm",
        model=model, fold=fold, class_name=cls, image_id=image_id,
    )


def image_for(e, shape=(6, 6)):
    seed = abs(hash(e.sort_key())) % (2**32)
    return np.random.default_rng(seed).random(shape)


# ---------------------------------------------------------------------------
# aggregate

def test_single_image_identity():
    img = np.random.default_rng(0).random((8, 8))
    hm = aggregate([img])
    assert np.array_equal(hm.pixels, img)
    assert hm.support == 1


def test_zeros_and_ones_average_to_half():
    hm = aggregate([np.zeros((4, 4)), np.ones((4, 4))])
    assert (hm.pixels == 0.5).all()
    assert hm.support == 2


def test_aggregate_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([np.zeros((4, 4)), np.zeros((4, 5))])
    with pytest.raises(ValueError):
        aggregate([np.full((2, 2), 1.5)])


def test_equal_fold_supports_mean_of_means():
    rng = np.random.default_rng(1)
    folds = [[rng.random((5, 5)) for _ in range(7)] for _ in range(5)]
    per_fold = [aggregate(f).pixels for f in folds]
    flat = aggregate([im for f in folds for im in f]).pixels
    assert np.abs(flat - np.mean(per_fold, axis=0)).max() < 1e-12


def test_unequal_supports_weight_by_count():
    rng = np.random.default_rng(2)
    f1 = [rng.random((5, 5)) for _ in range(100)]
    f2 = [rng.random((5, 5)) for _ in range(50)]
    h1 = aggregate(f1).pixels
    h2 = aggregate(f2).pixels
    union = aggregate(f1 + f2).pixels
    assert np.abs(union - (100 * h1 + 50 * h2) / 150).max() < 1e-12


# ---------------------------------------------------------------------------
# grouping

def full_manifest(n_models=12, n_folds=5, n_images=100):
    classes = ["anger", "disgust", "fear", "happiness", "sadness", "surprise"]
    return [
        entry(f"m{j:02d}", f"f{k}", c, f"i{i:03d}")
        for j in range(n_models)
        for k in range(n_folds)
        for c in classes
        for i in range(n_images)
    ]


def test_group_counts_at_three_levels():
    manifest = full_manifest(n_images=2)  # counts don't depend on images/group
    assert len(group_entries(manifest, "per_fold")) == 12 * 5 * 6
    assert len(group_entries(manifest, "per_model")) == 12 * 6
    assert len(group_entries(manifest, "global")) == 6


def test_single_entry_identical_at_all_levels():
    e = entry()
    img = image_for(e)
    results = {
        level: group_and_aggregate([e], level, loader=image_for)[0]
        for level in ("per_fold", "per_model", "global")
    }
    for hm in results.values():
        assert np.array_equal(hm.pixels, img)
        assert hm.support == 1
    assert results["per_fold"].group == {"model": "m0", "fold": "f0", "class": "anger"}
    assert results["global"].group == {"class": "anger"}


def test_shuffle_invariance_is_bit_exact():
    manifest = full_manifest(n_models=2, n_folds=2, n_images=5)
    rng = np.random.default_rng(3)
    shuffled = list(manifest)
    rng.shuffle(shuffled)
    for level in ("per_fold", "per_model", "global"):
        a = group_and_aggregate(manifest, level, loader=image_for)
        b = group_and_aggregate(shuffled, level, loader=image_for)
        assert len(a) == len(b)
        for ha, hb in zip(a, b):
            assert ha.group == hb.group
            assert np.array_equal(ha.pixels, hb.pixels)  # bit-identical


def test_global_equals_support_weighted_model_mean():
    manifest = full_manifest(n_models=3, n_folds=2, n_images=4)
    # drop some entries so supports differ
    manifest = [e for i, e in enumerate(manifest) if i % 7 != 0]
    per_model = group_and_aggregate(manifest, "per_model", loader=image_for)
    global_ = group_and_aggregate(manifest, "global", loader=image_for)
    for hg in global_:
        members = [h for h in per_model if h.group["class"] == hg.group["class"]]
        weighted = sum(h.support * h.pixels for h in members)
        total = sum(h.support for h in members)
        assert total == hg.support
        assert np.abs(hg.pixels - weighted / total).max() < 1e-12


def test_duplicate_key_rejected():
    manifest = [entry(image_id="i1", path="a.pgm"), entry(image_id="i1", path="b.pgm")]
    with pytest.raises(ValueError, match="duplicate"):
        group_entries(manifest, "global")


def test_unknown_class_rejected():
    with pytest.raises(ValueError):
        entry(cls="boredom")


def test_resolution_mismatch_rejected():
    manifest = [entry(image_id="i0"), entry(image_id="i1")]

    def loader(e):
        return np.zeros((4, 4)) if e.image_id == "i0" else np.zeros((4, 5))

    with pytest.raises(ValueError, match="resolution"):
        group_and_aggregate(manifest, "global", loader=loader)


# ---------------------------------------------------------------------------
# file formats

def test_manifest_roundtrip(tmp_path):
    manifest = full_manifest(n_models=2, n_folds=1, n_images=2)
    p = tmp_path / "manifest.json"
    save_manifest(p, manifest)
    again = load_manifest(p)
    assert again == manifest
    raw = json.loads(p.read_text())
    assert set(raw[0]) == {"path", "model", "fold", "class", "image_id"}


def test_manifest_missing_field(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps([{"path": "x.pgm", "model": "m", "fold": "f", "class": "anger"}]))
    with pytest.raises(ValueError, match="image_id"):
        load_manifest(p)


def test_heatmap_roundtrip_with_sidecar(tmp_path):
    img = np.random.default_rng(4).random((8, 8))
    hm = aggregate([img], {"model": "m0", "class": "fear"})
    p = tmp_path / "hm.pgm"
    save_heatmap(p, hm, extra={"config_hash": "abc123"})
    meta = json.loads((tmp_path / "hm.pgm.json").read_text())
    assert meta["support"] == 1 and meta["config_hash"] == "abc123"
    again = load_heatmap(p)
    assert again.group == hm.group
    # 16-bit quantization: half a step at most
    assert np.abs(again.pixels - hm.pixels).max() <= 0.5 / 65535 + 1e-12
