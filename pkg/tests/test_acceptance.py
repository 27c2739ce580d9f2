"""Acceptance suite: one test per shipping criterion, each with its stated
tolerance and wall-clock budget, printing one PASS line with the measured
numbers.

The end-to-end criteria share one full pipeline run (session fixture); the
determinism criterion replays it with a different worker count and compares
artifacts byte for byte.
"""

import dataclasses
import time

import numpy as np
import numpy.testing as npt
import pytest

from partmine import pipeline, synth
from partmine.exemplar import ExemplarDetector
from partmine.localize import (
    TAXONOMY,
    classify_localization,
    extract_box,
    iou,
    object_map,
    response_heat_map,
)
from partmine.mining import entropy_coverage, similarity_matrix, spectral_partition
from partmine.numerics import (
    LinearModel,
    SvmConfig,
    fit_whitening,
    lda_detector,
    sigmoid,
    svm_objective,
    train_linear_svm,
    train_svm_hard_negative,
)
from partmine.pipeline import PipelineConfig
from partmine.synth import (
    adjusted_rand_index,
    oracle_covariance,
    oracle_mean,
    oracle_object_map,
    oracle_part_map,
    planted_detectors,
    qp_oracle,
)

CERT = SvmConfig(tol=1e-7)  # certification-grade stopping threshold


def report(line):
    print(line, flush=True)


# ---------------------------------------------------------------------------
# criterion 1: entropy growth law and closed-form coverage values

def test_criterion_1_entropy_law():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    n = 100_000
    p = rng.uniform(1e-6, 1.0 - 1e-6, n)
    frac = rng.uniform(1e-6, 1.0 - 1e-6, n)
    dp = p * frac

    def h(x):
        return -x * np.log2(x)

    split = h(p - dp) + h(dp)
    assert np.all(h(p) < split), "splitting a mass must increase its entropy term"
    assert np.all(split <= 2.0 * h(p / 2.0) + 1e-12), \
        "the even split must dominate"

    def dets(sources):
        return [
            ExemplarDetector(
                model=LinearModel(np.zeros(3)), category=0,
                source=(s, 0), positives=[(s, 0)],
            )
            for s in sources
        ]

    cases = [
        (["a", "a", "a", "a"], 0.0),
        (["a", "b", "c", "d"], 2.0),
        (["a", "a", "b", "c"], 1.5),
    ]
    for sources, want in cases:
        got = entropy_coverage(list(range(len(sources))), dets(sources))
        assert abs(got - want) <= 1e-12, (sources, got, want)

    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    report(
        f"criterion 1 (entropy law): PASS, {n} draws and "
        f"{len(cases)} closed-form cases in {elapsed:.2f}s"
    )


# ---------------------------------------------------------------------------
# criterion 2: closed-form detector vs an independent dense solver

def test_criterion_2_lda_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        dim = int(rng.integers(4, 129))
        n = int(rng.integers(dim + 2, 2 * dim + 16))
        X = rng.standard_normal((n, dim)) @ np.diag(rng.uniform(0.5, 2.0, dim))
        X += rng.standard_normal(dim)
        lam = float(rng.uniform(0.01, 1.0))
        wh = fit_whitening(X, shrinkage_lambda=lam)
        feat = X[int(rng.integers(n))] + rng.standard_normal(dim)
        got = lda_detector(wh, feat).direction
        cov = oracle_covariance(X) + lam * np.eye(dim)
        want = np.linalg.solve(cov, feat - oracle_mean(X))
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        worst = max(worst, rel)
    assert worst <= 1e-8, f"worst relative direction error {worst:.3e}"
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    report(
        f"criterion 2 (closed-form detector vs dense solve): PASS, "
        f"100 systems, worst rel err {worst:.2e}, {elapsed:.2f}s"
    )


# ---------------------------------------------------------------------------
# criterion 3: bag-weighted SVM certified against the gap oracle

def test_criterion_3_mil_dual_certification():
    t0 = time.monotonic()
    rng = np.random.default_rng(2)
    worst_obj = 0.0
    for _ in range(50):
        n_bags = int(rng.integers(2, 11))
        n_neg = int(rng.integers(5, 51))
        dim = int(rng.integers(2, 9))
        C = float(rng.uniform(0.5, 4.0))
        deltas = rng.uniform(0.05, 1.0, n_bags)
        X_pos = np.concatenate(
            [rng.standard_normal((n_bags, dim)) + 0.5, np.ones((n_bags, 1))],
            axis=1,
        )
        X_neg = np.concatenate(
            [rng.standard_normal((n_neg, dim)) - 0.5, np.ones((n_neg, 1))],
            axis=1,
        )
        pos_cost = C * deltas

        result = train_svm_hard_negative(X_pos, pos_cost, X_neg, C, CERT)
        assert result.converged

        X = np.concatenate([X_pos, X_neg], axis=0)
        y = np.concatenate([np.ones(n_bags), -np.ones(n_neg)])
        cost = np.concatenate([pos_cost, np.full(n_neg, C)])
        oracle = qp_oracle(X, y, cost, gap_tol=1e-9)
        rel = abs(result.objective - oracle.primal) / max(1.0, abs(oracle.primal))
        worst_obj = max(worst_obj, rel)
        assert rel <= 1e-5, f"objective off oracle by {rel:.3e}"

        # dual box: bag coefficients within C * delta, negatives within C
        assert np.all(result.alpha_pos >= -1e-12)
        assert np.all(result.alpha_pos <= pos_cost + 1e-9)
        alpha_neg = result.alpha_neg_full(n_neg)
        assert np.all(alpha_neg >= -1e-12)
        assert np.all(alpha_neg <= C + 1e-9)

        # the solution is the dual-weighted combination of the samples
        alpha = np.concatenate([result.alpha_pos, alpha_neg])
        npt.assert_allclose(
            result.model.weights, (alpha * y) @ X, rtol=1e-9, atol=1e-10
        )

        # complementary slackness case law at 1e-4
        margin = y * (X @ result.model.weights)
        at_zero = alpha < 1e-9
        at_cost = alpha > cost - 1e-9
        interior = ~at_zero & ~at_cost
        assert np.all(margin[at_zero] >= 1.0 - 1e-4)
        assert np.all(margin[at_cost] <= 1.0 + 1e-4)
        npt.assert_allclose(margin[interior], 1.0, rtol=0, atol=1e-4)

    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    report(
        f"criterion 3 (bag-weighted SVM dual certification): PASS, "
        f"50 problems, worst objective gap {worst_obj:.2e}, {elapsed:.2f}s"
    )


# ---------------------------------------------------------------------------
# criterion 4: hard-negative mining equals full-pool training

def test_criterion_4_mining_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    # small starting cache so the scan/add/prune loop actually runs
    mine_cfg = SvmConfig(tol=1e-7, init_cache=32)
    worst = 0.0
    max_rounds = 0
    for _ in range(10):
        n_pos = int(rng.integers(5, 31))
        n_neg = int(rng.integers(100, 501))
        dim = int(rng.integers(4, 17))
        X_pos = np.concatenate(
            [rng.standard_normal((n_pos, dim)) + 0.4, np.ones((n_pos, 1))],
            axis=1,
        )
        X_neg = np.concatenate(
            [rng.standard_normal((n_neg, dim)) - 0.4, np.ones((n_neg, 1))],
            axis=1,
        )
        pos_cost = rng.uniform(0.5, 2.0, n_pos)

        mined = train_svm_hard_negative(X_pos, pos_cost, X_neg, 1.0, mine_cfg)
        assert mined.converged
        max_rounds = max(max_rounds, mined.rounds)

        X = np.concatenate([X_pos, X_neg], axis=0)
        y = np.concatenate([np.ones(n_pos), -np.ones(n_neg)])
        cost = np.concatenate([pos_cost, np.ones(n_neg)])
        full = train_linear_svm(X, y, cost, CERT)
        full_obj = svm_objective(full.weights, X, y, cost)
        rel = abs(mined.objective - full_obj) / max(1.0, abs(full_obj))
        worst = max(worst, rel)
        assert rel <= 1e-5, f"mined objective off full-pool by {rel:.3e}"

    assert max_rounds >= 2, "pools never forced a second mining round"
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    report(
        f"criterion 4 (mining vs full pool): PASS, 10 pools <= 500, "
        f"worst rel gap {worst:.2e}, up to {max_rounds} rounds, {elapsed:.2f}s"
    )


# ---------------------------------------------------------------------------
# criterion 5: spectral recovery of planted detector blocks

def test_criterion_5_spectral_recovery():
    t0 = time.monotonic()
    hits = 0
    scores = []
    for seed in range(10):
        W, truth = planted_detectors(3, 20, dim=32, jitter=0.05, seed=seed)
        labels = spectral_partition(similarity_matrix(W), 3, seed=seed)
        ari = adjusted_rand_index(labels, truth)
        scores.append(ari)
        hits += ari >= 0.95
    assert hits >= 9, f"recovered on only {hits}/10 seeds: {scores}"
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    report(
        f"criterion 5 (spectral block recovery): PASS, {hits}/10 seeds, "
        f"min ARI {min(scores):.3f}, {elapsed:.2f}s"
    )


# ---------------------------------------------------------------------------
# criteria 6 and 9 share one full-scale pipeline run

ACCEPT_OVERRIDES = dict(
    seed=0,
    jobs=1,
    k_clusters=12,
    n_keep=6,
    top_patterns=60,
    per_image_cap=10,
    max_patches=1200,
    synth_categories=5,
    synth_parts=3,
    synth_bags=100,
    synth_instances=50,
    synth_dim=64,
    synth_sigma=0.05,
    synth_corrupt=0.0,
)


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    cfg = PipelineConfig(**ACCEPT_OVERRIDES)
    dataset, truth = synth.generate(cfg.synth_spec())
    out = tmp_path_factory.mktemp("accept") / "base"
    t0 = time.monotonic()
    summary = pipeline.run_pipeline(dataset, cfg, str(out), truth=truth)
    elapsed = time.monotonic() - t0
    return {
        "cfg": cfg,
        "dataset": dataset,
        "truth": truth,
        "out": out,
        "summary": summary,
        "elapsed": elapsed,
    }


def test_criterion_6_end_to_end_planted(acceptance_run):
    summary = acceptance_run["summary"]
    elapsed = acceptance_run["elapsed"]
    assert summary["accuracy"] >= 0.95, f"accuracy {summary['accuracy']:.4f}"
    assert summary["corloc"] >= 0.90, f"CorLoc {summary['corloc']:.4f}"
    assert elapsed < 600.0, f"pipeline took {elapsed:.1f}s"
    report(
        f"criterion 6 (end-to-end planted): PASS, accuracy "
        f"{summary['accuracy']:.4f}, mAP {summary['map']:.4f}, CorLoc "
        f"{summary['corloc']:.4f}, {elapsed:.1f}s"
    )


# ---------------------------------------------------------------------------
# criterion 7: initialization and confidence ablation under corruption

ABLATE_OVERRIDES = dict(
    jobs=1,
    k_folds=3,
    iterations=3,
    s_max=5,
    k_clusters=8,
    n_keep=3,
    top_patterns=40,
    per_image_cap=10,
    max_patches=800,
    synth_categories=3,
    synth_parts=2,
    synth_bags=60,
    synth_instances=15,
    synth_dim=32,
    synth_sigma=0.08,
    synth_corrupt=0.2,
    synth_image_size=64,
)


def test_criterion_7_ablation_direction(tmp_path):
    t0 = time.monotonic()
    cfg = PipelineConfig(**ABLATE_OVERRIDES)
    seeds = [0, 1, 2, 3, 4]
    arms = ["KM+clsMIL", "PM+MIL", "PM+clsMIL"]
    rows = pipeline.run_ablation(cfg, str(tmp_path), seeds, arms)
    by = {(r["seed"], r["arm"]): r for r in rows}

    init_wins = sum(
        by[(s, "PM+clsMIL")]["accuracy"] >= by[(s, "KM+clsMIL")]["accuracy"]
        for s in seeds
    )
    conf_wins = sum(
        by[(s, "PM+clsMIL")]["accuracy"] >= by[(s, "PM+MIL")]["accuracy"]
        for s in seeds
    )
    assert init_wins >= 4, f"mined init beat k-means on only {init_wins}/5 seeds"
    assert conf_wins >= 4, f"confidence beat plain MIL on only {conf_wins}/5 seeds"

    for s in seeds:
        r = by[(s, "PM+clsMIL")]
        assert r["delta_corrupt"] < r["delta_clean"], (
            f"seed {s}: corrupted bags' mean confidence "
            f"{r['delta_corrupt']:.4f} not below clean {r['delta_clean']:.4f}"
        )

    elapsed = time.monotonic() - t0
    assert elapsed < 1800.0
    report(
        f"criterion 7 (ablation direction): PASS, init {init_wins}/5, "
        f"confidence {conf_wins}/5, corrupted confidence below clean on 5/5, "
        f"{elapsed:.1f}s"
    )


# ---------------------------------------------------------------------------
# criterion 8: localization formula oracles and box-pair taxonomy

def test_criterion_8_localization_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(4)

    # part maps against the stride-1 transcription oracle
    for _ in range(20):
        size = int(rng.integers(16, 49))
        n = int(rng.integers(1, 16))
        x0 = rng.uniform(0, size * 0.8, n)
        y0 = rng.uniform(0, size * 0.8, n)
        boxes = np.stack(
            [x0, y0, x0 + rng.uniform(1, size * 0.5, n),
             y0 + rng.uniform(1, size * 0.5, n)], axis=1,
        )
        responses = 2.0 * rng.standard_normal(n)
        heat = response_heat_map(boxes, responses, size, size, stride=1)
        want = oracle_part_map(boxes, responses, size, size, stride=1)
        npt.assert_allclose(heat.grid, want, rtol=0, atol=1e-10)

    # object maps against the convex-combination oracle, stride 1
    spec = synth.SynthSpec(
        n_categories=2, n_parts=2, plants_per_part=2,
        bags_per_category=3, instances_per_bag=10, feature_dim=16,
        noise_sigma=0.05, corrupt_fraction=0.0, image_size=32, seed=5,
    )
    ds, _ = synth.generate(spec)
    models = [
        LinearModel(rng.standard_normal(ds.feature_dim + 1)) for _ in range(3)
    ]
    for i in range(ds.n_images):
        heat, rel = object_map(ds, i, models, stride=1)
        im = ds.images[i]
        F = ds.features_of(i)
        parts, rels = [], []
        for model in models:
            r = model.response(F)
            parts.append(oracle_part_map(im.boxes, r, im.width, im.height, 1))
            rels.append(float(np.max(sigmoid(r))))
        npt.assert_allclose(rel, rels, rtol=1e-12)
        npt.assert_allclose(
            heat.grid, oracle_object_map(parts, rels), rtol=0, atol=1e-10
        )

    # box-pair taxonomy: exactly one class, and its defining predicate holds
    counts = dict.fromkeys(TAXONOMY, 0)
    for _ in range(10_000):
        def rand_box():
            bx0 = rng.uniform(0, 30)
            by0 = rng.uniform(0, 30)
            return (
                bx0, by0,
                bx0 + rng.uniform(0.5, 20), by0 + rng.uniform(0.5, 20),
            )

        hyp = rand_box()
        gt = rand_box()
        outcome = classify_localization(hyp, [gt])
        counts[outcome] += 1
        v = iou(hyp, gt)
        assert 0.0 <= v <= 1.0
        assert v == iou(gt, hyp)
        hyp_in =(hyp[0] >= gt[0] and hyp[1] >= gt[1]
                  and hyp[2] <= gt[2] and hyp[3] <= gt[3])
        gt_in = (gt[0] >= hyp[0] and gt[1] >= hyp[1]
                 and gt[2] <= hyp[2] and gt[3] <= hyp[3])
        if outcome == "correct":
            assert v >= 0.5
        elif outcome == "hyp_in_gt":
            assert v < 0.5 and hyp_in
        elif outcome == "gt_in_hyp":
            assert v < 0.5 and gt_in and not hyp_in
        elif outcome == "no_overlap":
            assert v == 0.0 and not hyp_in and not gt_in
        else:
            assert 0.0 < v < 0.5 and not hyp_in and not gt_in
    assert all(counts[o] > 0 for o in ("correct", "no_overlap", "low_overlap")), \
        f"degenerate draw distribution: {counts}"

    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    report(
        f"criterion 8 (localization oracles): PASS, 20 bags to 1e-10, "
        f"10000 box pairs partitioned {counts}, {elapsed:.2f}s"
    )


# ---------------------------------------------------------------------------
# criterion 9: bit-identical artifacts across reruns and worker counts

def artifact_bytes(out_dir):
    files = sorted(p.name for p in out_dir.iterdir() if p.suffix == ".csv")
    files += sorted(p.name for p in out_dir.iterdir() if p.suffix == ".bank")
    return {name: (out_dir / name).read_bytes() for name in files}


def test_criterion_9_determinism(acceptance_run, tmp_path):
    t0 = time.monotonic()
    base = artifact_bytes(acceptance_run["out"])
    assert base, "baseline run produced no reports"
    dataset = acceptance_run["dataset"]
    truth = acceptance_run["truth"]
    for tag, jobs in (("rerun", 1), ("threads", 3)):
        cfg = dataclasses.replace(acceptance_run["cfg"], jobs=jobs)
        out = tmp_path / tag
        pipeline.run_pipeline(dataset, cfg, str(out), truth=truth)
        again = artifact_bytes(out)
        assert set(again) == set(base)
        for name in base:
            assert again[name] == base[name], \
                f"{name} differs on {tag} (jobs={jobs})"
    elapsed = time.monotonic() - t0
    report(
        f"criterion 9 (determinism): PASS, {len(base)} artifacts bit-identical "
        f"across rerun and jobs=3, {elapsed:.1f}s"
    )
