"""Closed-form exemplar detectors and positive-set augmentation."""

import numpy as np
import numpy.testing as npt
import pytest

from partmine.exemplar import (
    augment_exemplar,
    augment_exemplars,
    train_exemplar,
    train_exemplars,
)
from partmine.numerics import fit_whitening
from partmine.patchsel import PatchSelection
from partmine.synth import (
    SynthSpec,
    generate,
    oracle_covariance,
    oracle_lda_direction,
    oracle_mean,
)


def planted_world(seed=0, n_images=5, sigma=0.05):
    spec = SynthSpec(
        n_categories=2, n_parts=1, plants_per_part=1,
        bags_per_category=n_images, instances_per_bag=10, feature_dim=16,
        noise_sigma=sigma, corrupt_fraction=0.0, image_size=32, seed=seed,
    )
    ds, truth = generate(spec)
    wh = fit_whitening(ds.features, shrinkage_lambda=0.1)
    return ds, truth, wh


def test_single_exemplar_matches_oracle_direction():
    ds, truth, wh = planted_world()
    iid, rec = next(iter(truth.images.items()))
    m, _ = rec["planted"][0]
    det = train_exemplar(wh, ds, rec["category"], iid, m)
    want = oracle_lda_direction(
        oracle_covariance(ds.features),
        0.1,
        ds.instance_feature(ds.index_of(iid), m),
        oracle_mean(ds.features),
    )
    npt.assert_allclose(det.model.direction, want, rtol=1e-9, atol=1e-11)
    assert det.model.bias == 0.0
    assert det.positives == [(iid, m)]


def test_batched_exemplars_match_singletons():
    ds, truth, wh = planted_world(seed=1)
    items = []
    for iid, rec in truth.images.items():
        if rec["category"] == 0:
            m, _ = rec["planted"][0]
            items.append((iid, m, 1.0))
    sel = PatchSelection(category=0, tau=1.0, items=items)
    batch = train_exemplars(wh, ds, sel)
    for det, (iid, m, _) in zip(batch, items):
        single = train_exemplar(wh, ds, 0, iid, m)
        npt.assert_allclose(
            det.model.weights, single.model.weights, rtol=1e-12, atol=1e-14
        )
        assert det.source == (iid, m)


def test_augmentation_recovers_planted_instances():
    # five bags share one pattern at sigma 0.05: after two rounds the
    # positive set contains at least four of the five planted patches
    ds, truth, wh = planted_world(seed=2, n_images=5)
    planted = {
        iid: rec["planted"][0][0]
        for iid, rec in truth.images.items()
        if rec["category"] == 0
    }
    seed_iid = sorted(planted)[0]
    det = train_exemplar(wh, ds, 0, seed_iid, planted[seed_iid])
    grown = augment_exemplar(wh, det, ds, rounds=2, top_k=2)
    got = set(grown.positives)
    hits = sum(1 for iid, m in planted.items() if (iid, m) in got)
    assert hits >= 4, f"only {hits} of 5 planted instances recovered"


def test_augmentation_keeps_one_patch_per_image():
    ds, truth, wh = planted_world(seed=3)
    iid, rec = next(
        (i, r) for i, r in truth.images.items() if r["category"] == 0
    )
    det = train_exemplar(wh, ds, 0, iid, rec["planted"][0][0])
    grown = augment_exemplar(wh, det, ds, rounds=3, top_k=5)
    images = [img for img, _ in grown.positives]
    assert len(images) == len(set(images))


def test_augmentation_returns_new_objects():
    ds, truth, wh = planted_world(seed=4)
    iid, rec = next(
        (i, r) for i, r in truth.images.items() if r["category"] == 0
    )
    det = train_exemplar(wh, ds, 0, iid, rec["planted"][0][0])
    before = det.model.weights.copy()
    before_pos = list(det.positives)
    grown = augment_exemplar(wh, det, ds, rounds=2, top_k=3)
    assert grown is not det
    npt.assert_array_equal(det.model.weights, before)
    assert det.positives == before_pos
    assert len(grown.positives) > len(before_pos)


def test_augmentation_zero_rounds_rederives_only():
    ds, truth, wh = planted_world(seed=5)
    iid, rec = next(
        (i, r) for i, r in truth.images.items() if r["category"] == 0
    )
    det = train_exemplar(wh, ds, 0, iid, rec["planted"][0][0])
    same = augment_exemplar(wh, det, ds, rounds=0, top_k=3)
    npt.assert_allclose(
        same.model.weights, det.model.weights, rtol=1e-12, atol=1e-14
    )
    assert same.positives == det.positives


def test_augmentation_validates_arguments():
    ds, truth, wh = planted_world(seed=6)
    iid, rec = next(iter(truth.images.items()))
    det = train_exemplar(wh, ds, rec["category"], iid, rec["planted"][0][0])
    with pytest.raises(ValueError):
        augment_exemplar(wh, det, ds, rounds=2, top_k=0)
    with pytest.raises(ValueError):
        augment_exemplar(wh, det, ds, rounds=-1, top_k=2)
    assert augment_exemplars(wh, [], ds) == []


def test_batched_augmentation_matches_single_path():
    ds, truth, wh = planted_world(seed=7)
    dets = []
    for iid, rec in truth.images.items():
        if rec["category"] == 0:
            dets.append(train_exemplar(wh, ds, 0, iid, rec["planted"][0][0]))
    grown_batch = augment_exemplars(wh, dets, ds, rounds=2, top_k=2)
    for det, grown in zip(dets, grown_batch):
        alone = augment_exemplar(wh, det, ds, rounds=2, top_k=2)
        npt.assert_allclose(
            grown.model.weights, alone.model.weights, rtol=1e-12, atol=1e-14
        )
        assert grown.positives == alone.positives


def test_detector_norm_stays_finite_across_rounds():
    ds, truth, wh = planted_world(seed=8)
    iid, rec = next(
        (i, r) for i, r in truth.images.items() if r["category"] == 0
    )
    det = train_exemplar(wh, ds, 0, iid, rec["planted"][0][0])
    for rounds in range(5):
        grown = augment_exemplar(wh, det, ds, rounds=rounds, top_k=3)
        norm = np.linalg.norm(grown.model.weights)
        assert np.isfinite(norm)
        assert norm < 1e6
