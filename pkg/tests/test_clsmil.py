"""Confidence-weighted MIL training loop: latents, pools, and the full
alternation."""

import numpy as np
import numpy.testing as npt
import pytest

from partmine.clsmil import (
    BagState,
    ClsMilConfig,
    build_negative_pools,
    init_bag_states,
    optimize_detector,
    train_cls_mil,
    train_mil_baseline,
    update_latents,
)
from partmine.dataset import make_folds
from partmine.exemplar import ExemplarDetector
from partmine.mining import DetectorCluster, mine_patterns
from partmine.numerics import LinearModel, sigmoid
from partmine.synth import SynthSpec, generate


def world(seed=0, corrupt=0.0, bags=10, sigma=0.05):
    spec = SynthSpec(
        n_categories=2, n_parts=1, plants_per_part=2,
        bags_per_category=bags, instances_per_bag=12, feature_dim=16,
        noise_sigma=sigma, corrupt_fraction=corrupt, image_size=32, seed=seed,
    )
    return generate(spec)


def prototype_cluster(ds, truth, category=0, top_patterns=100):
    """One-member cluster whose detector is the planted prototype itself."""
    det = ExemplarDetector(
        model=LinearModel(np.append(truth.prototypes[category, 0], 0.0)),
        category=category,
        source=("proto", 0),
        positives=[("proto", 0)],
    )
    cluster = DetectorCluster(
        category=category, members=[0], entropy=1.0, rank=0
    )
    mine_patterns(cluster, [det], ds, top_patterns=top_patterns)
    return cluster, [det]


# ---------------------------------------------------------------------------
# initial latents

def test_init_states_seeded_and_seedless():
    ds, truth = world()
    cluster, dets = prototype_cluster(ds, truth, top_patterns=4)
    seeds = {iid: m for iid, m, _ in cluster.seed_patterns}
    states = init_bag_states(ds, cluster, dets)
    assert len(states) == len(ds.positives_of(0))
    combined = dets[0].model
    for bag in states:
        if bag.image_id in seeds:
            assert bag.delta == 1.0
            assert bag.witness.tolist() == [seeds[bag.image_id]]
        else:
            assert bag.delta == 0.5
            scores = combined.response(ds.features_of(bag.image_index))
            assert bag.witness.tolist() == [int(np.argmax(scores))]
        npt.assert_array_equal(bag.weights, [1.0])
        npt.assert_array_equal(
            bag.phi, ds.instance_feature(bag.image_index, int(bag.witness[0]))
        )


# ---------------------------------------------------------------------------
# latent update formulas

def test_update_latents_formulas():
    ds, truth = world(seed=1)
    cluster, dets = prototype_cluster(ds, truth)
    bags = init_bag_states(ds, cluster, dets)
    rng = np.random.default_rng(3)
    model = LinearModel(rng.standard_normal(ds.feature_dim + 1))
    updated = update_latents(bags, ds, lambda b: model, s_max=4)
    for old, new in zip(bags, updated):
        assert new is not old
        F = ds.features_of(old.image_index)
        scores = model.response(F)
        order = np.argsort(-scores, kind="stable")[:4]
        npt.assert_array_equal(new.witness, order)
        npt.assert_allclose(new.weights, sigmoid(scores[order]), rtol=1e-12)
        want_phi = (new.weights @ F[order]) / new.weights.sum()
        npt.assert_allclose(new.phi, want_phi, rtol=1e-12)
        want_delta = float(sigmoid(float(model.response(want_phi))))
        assert new.delta == pytest.approx(want_delta, rel=1e-12)
    # inputs untouched
    assert all(b.witness.shape == (1,) for b in bags)


def test_update_latents_caps_witness_at_bag_size():
    ds, truth = world(seed=2)
    cluster, dets = prototype_cluster(ds, truth)
    bags = init_bag_states(ds, cluster, dets)
    model = dets[0].model
    updated = update_latents(bags, ds, lambda b: model, s_max=99)
    for bag in updated:
        assert bag.witness.shape[0] == 12  # bag size, not s_max
        assert len(set(bag.witness.tolist())) == 12


def test_update_latents_ties_to_lower_index():
    ds, truth = world(seed=3)
    cluster, dets = prototype_cluster(ds, truth)
    bags = init_bag_states(ds, cluster, dets)[:1]
    zero = LinearModel(np.zeros(ds.feature_dim + 1))  # every score ties at 0
    updated = update_latents(bags, ds, lambda b: zero, s_max=3)
    npt.assert_array_equal(updated[0].witness, [0, 1, 2])


# ---------------------------------------------------------------------------
# negative pools

def test_negative_pools_layout():
    ds, _ = world(seed=4)
    folds = make_folds(ds, 3, seed=0)
    pools = build_negative_pools(ds, folds, 0)
    neg = ds.negatives_of(0)
    want_full = np.concatenate([ds.augmented_of(i) for i in neg], axis=0)
    npt.assert_array_equal(pools.full, want_full)
    assert len(pools.by_fold) == 3
    for j in range(3):
        keep = [i for i in neg if folds.fold_of(ds.images[i].image_id) != j]
        want = np.concatenate([ds.augmented_of(i) for i in keep], axis=0)
        npt.assert_array_equal(pools.by_fold[j], want)
    sizes = [pools.by_fold[j].shape[0] for j in range(3)]
    assert sum(pools.full.shape[0] - s for s in sizes) == pools.full.shape[0] * 3 - sum(sizes)
    assert all(s < pools.full.shape[0] for s in sizes)


def test_negative_pools_empty_category():
    ds, _ = world(seed=4, bags=4)
    sub = ds.subset(ds.positives_of(0))  # no negatives of category 0 remain
    folds = make_folds(sub, 2, seed=0)
    pools = build_negative_pools(sub, folds, 0)
    assert pools.full.shape == (0, sub.feature_dim + 1)
    assert all(p.shape[0] == 0 for p in pools.by_fold)


# ---------------------------------------------------------------------------
# one Optimizing solve

def test_optimize_detector_costs_use_confidence():
    ds, truth = world(seed=5)
    folds = make_folds(ds, 2, seed=0)
    pools = build_negative_pools(ds, folds, 0)
    cluster, dets = prototype_cluster(ds, truth)
    bags = init_bag_states(ds, cluster, dets)
    for bag in bags[::2]:
        bag.delta = 1e-6  # these bags should barely matter
    conf = ClsMilConfig(confidence=True, C=10.0)
    flat = ClsMilConfig(confidence=False, C=10.0)
    res_conf = optimize_detector(bags, pools.full, conf)
    res_flat = optimize_detector(bags, pools.full, flat)
    assert res_conf.model.weights.shape == (ds.feature_dim + 1,)
    assert np.isfinite(res_conf.objective)
    # down-weighting half the bags must change the solution
    assert not np.allclose(res_conf.model.weights, res_flat.model.weights)


# ---------------------------------------------------------------------------
# the full loop

def test_trained_witnesses_are_planted_instances():
    ds, truth = world(seed=6)
    folds = make_folds(ds, 2, seed=0)
    cluster, dets = prototype_cluster(ds, truth)
    config = ClsMilConfig(iterations=2, s_max=2, C=1.0)
    out = train_cls_mil(ds, folds, cluster, dets, config)
    total = 0
    hits = 0
    for bag in out.bag_states:
        planted = {m for m, _ in truth.images[bag.image_id]["planted"]}
        for m in bag.witness.tolist():
            total += 1
            hits += m in planted
    assert total == 2 * len(out.bag_states)
    assert hits / total >= 0.95, f"witness recovery {hits}/{total}"


def test_corrupted_bags_get_lower_confidence():
    ds, truth = world(seed=7, corrupt=0.3)
    folds = make_folds(ds, 2, seed=0)
    cluster, dets = prototype_cluster(ds, truth)
    config = ClsMilConfig(iterations=2, s_max=2, C=1.0)
    out = train_cls_mil(ds, folds, cluster, dets, config)
    clean, corrupted = [], []
    for bag in out.bag_states:
        rec = truth.images[bag.image_id]
        (corrupted if not rec["planted"] else clean).append(bag.delta)
    assert clean and corrupted
    assert np.mean(corrupted) < np.mean(clean)


def test_trace_covers_every_solve():
    ds, truth = world(seed=8, bags=6)
    folds = make_folds(ds, 2, seed=0)
    cluster, dets = prototype_cluster(ds, truth)
    config = ClsMilConfig(iterations=3, s_max=2)
    out = train_cls_mil(ds, folds, cluster, dets, config)
    stages = [(e.iteration, e.stage) for e in out.objective_trace]
    want = [(t, f"fold{j}") for t in (1, 2, 3) for j in (0, 1)]
    want.append((4, "final"))
    assert stages == want
    assert all(np.isfinite(e.objective) for e in out.objective_trace)
    assert all(e.mining_rounds >= 1 for e in out.objective_trace)
    assert len(out.fold_models_history) == 3
    assert all(len(models) == 2 for models in out.fold_models_history)
    assert out.rank == cluster.rank
    assert out.entropy == cluster.entropy
    assert out.source == cluster.seed_patterns[0][:2]


def test_baseline_pins_confidence_and_single_witness():
    ds, truth = world(seed=9, bags=6)
    folds = make_folds(ds, 2, seed=0)
    cluster, dets = prototype_cluster(ds, truth)
    config = ClsMilConfig(iterations=2, s_max=5, C=1.0)
    out = train_mil_baseline(ds, folds, cluster, dets, config)
    for bag in out.bag_states:
        assert bag.delta == 1.0
        assert bag.witness.shape == (1,)
    assert config.confidence  # caller's config is untouched


def test_effective_s_max():
    assert ClsMilConfig(s_max=7, confidence=True).effective_s_max() == 7
    assert ClsMilConfig(s_max=7, confidence=False).effective_s_max() == 1


def test_empty_seed_patterns_fall_back():
    ds, truth = world(seed=10, bags=4)
    folds = make_folds(ds, 2, seed=0)
    cluster, dets = prototype_cluster(ds, truth)
    cluster.seed_patterns = []
    states = init_bag_states(ds, cluster, dets)
    assert all(bag.delta == 0.5 for bag in states)
    config = ClsMilConfig(iterations=1, s_max=2)
    out = train_cls_mil(ds, folds, cluster, dets, config)
    assert out.source == ("", -1)
