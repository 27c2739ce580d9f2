"""End-to-end orchestration: stages, artifacts, and the ablation harness.

Every artifact is written atomically and every stage derives its randomness
from the one configured seed, with parallel work mapped in input order, so
a rerun with the same seed produces bit-identical reports regardless of
``jobs``.
"""

import dataclasses
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import clsmil, encode, exemplar, localize, mining, patchsel, synth
from ._kernels import kernel_mode
from .dataset import dataset_digest, make_folds, write_atomic
from .errors import DataError
from .numerics import SvmConfig, fit_whitening
from . import __version__


@dataclass
class PipelineConfig:
    """Every knob of the pipeline, serializable as key=value lines."""

    seed: int = 0
    jobs: int = 0                       # 0 = one worker per CPU
    k_folds: int = 5
    tau: float = 1.0
    C: float = 1.0
    final_C: float = 1.0
    shrinkage_lambda: float | None = None
    per_image_cap: int = 50
    max_patches: int = 2000
    exemplar_rounds: int = 2
    exemplar_top_k: int = 5
    k_clusters: int = 50
    n_keep: int = 20
    top_patterns: int = 100
    s_max: int = 10
    iterations: int = 3
    svm_tol: float = 1e-4
    svm_max_sweeps: int = 200000
    svm_max_rounds: int = 10
    svm_cache_cap: int = 20000
    svm_init_cache: int = 1024
    svm_prune_margin: float = 0.01
    stride: int = 4
    fg_threshold: float = 0.8
    bg_threshold: float = 0.2           # reserved for future masking use
    eval_fraction: float = 0.25
    tune_final: bool = False
    trace: bool = False
    save_heatmaps: bool = False
    # planted-pattern generator knobs (synth and ablation commands)
    synth_categories: int = 5
    synth_parts: int = 3
    synth_plants: int = 2
    synth_bags: int = 100
    synth_instances: int = 50
    synth_dim: int = 64
    synth_sigma: float = 0.05
    synth_corrupt: float = 0.0
    synth_background_scale: float = 1.0
    synth_prototype_scale: float = 3.0
    synth_image_size: int = 128

    def svm_config(self):
        return SvmConfig(
            tol=self.svm_tol,
            max_sweeps=self.svm_max_sweeps,
            max_rounds=self.svm_max_rounds,
            cache_cap=self.svm_cache_cap,
            init_cache=self.svm_init_cache,
            prune_margin=self.svm_prune_margin,
            seed=self.seed,
        )

    def clsmil_config(self, confidence=True):
        return clsmil.ClsMilConfig(
            iterations=self.iterations,
            s_max=self.s_max,
            C=self.C,
            confidence=confidence,
            svm=self.svm_config(),
        )

    def synth_spec(self, seed=None):
        return synth.SynthSpec(
            n_categories=self.synth_categories,
            n_parts=self.synth_parts,
            plants_per_part=self.synth_plants,
            bags_per_category=self.synth_bags,
            instances_per_bag=self.synth_instances,
            feature_dim=self.synth_dim,
            noise_sigma=self.synth_sigma,
            corrupt_fraction=self.synth_corrupt,
            background_scale=self.synth_background_scale,
            prototype_scale=self.synth_prototype_scale,
            image_size=self.synth_image_size,
            seed=self.seed if seed is None else seed,
        )

    def worker_count(self):
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={_format_value(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_items(cls, items, base=None):
        cfg = dataclasses.replace(base) if base else cls()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in items:
            if key not in fields:
                raise ValueError(f"unknown config key '{key}'")
            setattr(cfg, key, _coerce(key, raw))
        return cfg

    @classmethod
    def from_file(cls, path, base=None):
        items = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(
                        f"{path}:{lineno}: expected key=value, got {line!r}"
                    )
                key, _, raw = line.partition("=")
                items.append((key.strip(), raw.strip()))
        return cls.from_items(items, base=base)


_BOOL_WORDS = {
    "true": True, "1": True, "yes": True,
    "false": False, "0": False, "no": False,
}


def _coerce(key, raw):
    # field annotations are live type objects here, but compare against the
    # spelled-out forms too so stringified annotations keep working
    hints = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    hint = hints[key]
    if hint in (bool, "bool"):
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ValueError(f"config key '{key}': not a boolean: {raw!r}")
    if hint in (int, "int"):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"config key '{key}': not an integer: {raw!r}")
    if hint in (float, "float"):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"config key '{key}': not a number: {raw!r}")
    if hint in (float | None, "float | None"):
        if raw.lower() in ("none", "auto", ""):
            return None
        return float(raw)
    return raw


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parallel_map(fn, items, jobs):
    """Map preserving input order; thread-based so compiled kernels and
    BLAS overlap, results independent of worker count."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def fmt(v):
    return repr(float(v))


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) for c in row))
    write_atomic(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# stages

def split_eval(dataset, config):
    """Deterministic train/eval split; fold 0 of an auxiliary assignment is
    the eval set.  eval_fraction 0 reuses the whole dataset for both."""
    if config.eval_fraction <= 0.0:
        return dataset, dataset
    k = max(2, int(round(1.0 / config.eval_fraction)))
    folds = make_folds(dataset, k, config.seed)
    train_idx = [
        i for i, im in enumerate(dataset.images)
        if folds.fold_of(im.image_id) != 0
    ]
    eval_idx = [
        i for i, im in enumerate(dataset.images)
        if folds.fold_of(im.image_id) == 0
    ]
    return dataset.subset(train_idx), dataset.subset(eval_idx)


def run_select(dataset, folds, config):
    """Patch selection for every category; returns capped selections."""
    pooled = dataset.pooled_matrix()
    svm = config.svm_config()

    def one(category):
        classifiers = patchsel.train_fold_classifiers(
            dataset, folds, category, C=config.C, config=svm, pooled=pooled
        )
        sel = patchsel.select_patches(
            dataset, folds, classifiers,
            tau=config.tau, per_image_cap=config.per_image_cap,
        )
        return patchsel.cap_selection(sel, config.max_patches)

    return parallel_map(one, range(dataset.n_categories), config.worker_count())


def run_exemplars(dataset, selections, config):
    """Whitening plus augmented exemplar detectors, grouped per category."""
    whitening = fit_whitening(dataset.features, config.shrinkage_lambda)

    def one(selection):
        dets = exemplar.train_exemplars(whitening, dataset, selection)
        if not dets:
            raise DataError(
                f"category '{dataset.categories[selection.category]}' "
                "selected no patches; cannot build exemplars"
            )
        return exemplar.augment_exemplars(
            whitening, dets, dataset,
            rounds=config.exemplar_rounds, top_k=config.exemplar_top_k,
        )
    return parallel_map(one, selections, config.worker_count())


def run_cluster(dataset, exemplars_by_cat, config):
    """Spectral clustering, entropy ranking, and seed mining per category.

    Returns (kept clusters, all clusters) per category.  k is clamped to
    the number of exemplars when a category has fewer than k_clusters.
    """
    def one(detectors):
        category = detectors[0].category
        S = mining.similarity_matrix(detectors)
        A = np.maximum(S, 0.0)
        np.fill_diagonal(A, 0.0)
        active = int(np.sum(A.sum(axis=1) > 0.0))
        k = max(1, min(config.k_clusters, active))
        labels = mining.spectral_partition(S, k, config.seed)
        clusters = mining.build_clusters(detectors, labels, category)
        kept = mining.greedy_select(clusters, config.n_keep)
        for cluster in kept:
            mining.mine_patterns(
                cluster, detectors, dataset, top_patterns=config.top_patterns
            )
        return kept, clusters

    return parallel_map(one, exemplars_by_cat, config.worker_count())


def run_train(dataset, folds, exemplars_by_cat, kept_by_cat, config):
    """cls-MIL training for every kept cluster; detectors come back grouped
    by category and ordered by rank."""
    mil_config = config.clsmil_config(confidence=True)
    tasks = []
    for detectors, kept in zip(exemplars_by_cat, kept_by_cat):
        category = detectors[0].category
        pools = clsmil.build_negative_pools(dataset, folds, category)
        for cluster in kept:
            tasks.append((detectors, cluster, pools))

    def one(task):
        detectors, cluster, pools = task
        return clsmil.train_cls_mil(
            dataset, folds, cluster, detectors, mil_config, pools
        )

    trained = parallel_map(one, tasks, config.worker_count())
    trained.sort(key=lambda det: (det.category, det.rank))
    return trained


def bank_from_trained(feature_dim, trained):
    entries = []
    clusters = []
    for t, det in enumerate(trained):
        entries.append(
            mining.BankEntry(
                category=det.category,
                source_image_id=det.source[0],
                source_instance=det.source[1],
                weights=det.model.weights,
            )
        )
        clusters.append(
            mining.ClusterRecord(
                category=det.category,
                entropy=det.entropy,
                rank=det.rank,
                members=np.array([t], dtype=np.int64),
            )
        )
    return mining.DetectorBank(
        feature_dim=feature_dim, entries=entries, clusters=clusters
    )


def bank_from_exemplars(feature_dim, exemplars_by_cat, kept_by_cat=None):
    entries = []
    clusters = []
    offset = 0
    for g, detectors in enumerate(exemplars_by_cat):
        for det in detectors:
            entries.append(
                mining.BankEntry(
                    category=det.category,
                    source_image_id=det.source[0],
                    source_instance=det.source[1],
                    weights=det.model.weights,
                )
            )
        if kept_by_cat is not None:
            for cluster in kept_by_cat[g]:
                clusters.append(
                    mining.ClusterRecord(
                        category=cluster.category,
                        entropy=cluster.entropy,
                        rank=cluster.rank,
                        members=np.asarray(cluster.members, dtype=np.int64)
                        + offset,
                    )
                )
        offset += len(detectors)
    return mining.DetectorBank(
        feature_dim=feature_dim, entries=entries, clusters=clusters
    )


def patterns_rows(dataset, kept_by_cat):
    rows = []
    for kept in kept_by_cat:
        for cluster in kept:
            name = dataset.categories[cluster.category]
            for image_id, instance, score in cluster.seed_patterns:
                rows.append([name, cluster.rank, image_id, instance, fmt(score)])
    return rows


def clusters_from_patterns_csv(path, dataset, bank):
    """Rebuild kept clusters (with seeds) from a clustered bank plus the
    patterns CSV, for the standalone train stage."""
    import csv as _csv

    seeds = {}
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        if header != ["category", "rank", "image_id", "instance", "score"]:
            raise ValueError(f"unexpected patterns CSV header: {header}")
        for name, rank, image_id, instance, score in reader:
            c = dataset.categories.index(name)
            seeds.setdefault((c, int(rank)), []).append(
                (image_id, int(instance), float(score))
            )
    kept = []
    for rec in bank.clusters:
        if rec.rank < 0:
            continue
        cluster = mining.DetectorCluster(
            category=rec.category,
            members=[int(m) for m in rec.members],
            entropy=rec.entropy,
            rank=rec.rank,
            seed_patterns=seeds.get((rec.category, rec.rank), []),
        )
        kept.append(cluster)
    kept.sort(key=lambda cl: (cl.category, cl.rank))
    return kept


def write_codes_csv(path, dataset, codes):
    """Export a code matrix: one row per image, one column per detector.

    Codes carry signed responses, so they do not fit the nonnegative
    instance-feature container; values are repr-formatted and round-trip
    exactly."""
    header = ["image_id", "labels"] + [
        f"code{k}" for k in range(codes.shape[1])
    ]
    rows = []
    for i, im in enumerate(dataset.images):
        labels = ";".join(dataset.categories[c] for c in im.labels)
        rows.append([im.image_id, labels] + [fmt(v) for v in codes[i]])
    write_csv(path, header, rows)


def tune_final_C(codes, labels, n_categories, folds_k, seed, svm):
    """Pick the final classifier C from {0.1, 1, 10} by cross-validated
    accuracy on the training codes (ties to the smaller C)."""
    from .dataset import Dataset, ImageRecord

    n = codes.shape[0]
    grid = (0.1, 1.0, 10.0)
    # one shared fold assignment over the code rows
    records = [
        ImageRecord(
            image_id=f"row{i:06d}", labels=tuple(labels[i]), n_instances=1,
            width=1, height=1, start=i, stop=i + 1,
        )
        for i in range(n)
    ]
    carrier = Dataset(codes.shape[1], [str(c) for c in range(n_categories)],
                      records, codes)
    folds = make_folds(carrier, min(folds_k, n), seed)
    fold_ids = np.array(
        [folds.fold_of(f"row{i:06d}") for i in range(n)], dtype=np.int64
    )
    best = None
    for C in grid:
        scores = []
        for j in range(folds.k):
            train = fold_ids != j
            held = ~train
            if not held.any() or not train.any():
                continue
            try:
                models = encode.train_final_classifiers(
                    codes[train],
                    [labels[i] for i in np.nonzero(train)[0]],
                    n_categories, C, svm,
                )
            except DataError:
                continue
            sc = encode.category_scores(models, codes[held])
            try:
                scores.append(
                    encode.accuracy(
                        sc, [labels[i] for i in np.nonzero(held)[0]]
                    )
                )
            except DataError:
                continue
        mean = float(np.mean(scores)) if scores else 0.0
        if best is None or mean > best[1] + 1e-12:
            best = (C, mean)
    return best[0]


# ---------------------------------------------------------------------------
# full pipeline

def run_pipeline(dataset, config, out_dir, truth=None, dataset_path=None):
    """Run every stage and write all artifacts into out_dir.

    ``truth`` (a SynthTruth) enables localization scoring.  Returns a
    summary dict with the headline numbers.
    """
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.time()
    train_ds, eval_ds = split_eval(dataset, config)
    folds = make_folds(train_ds, config.k_folds, config.seed)

    selections = run_select(train_ds, folds, config)
    patchsel.selections_to_csv(
        selections, train_ds, os.path.join(out_dir, "selections.csv")
    )

    exemplars_by_cat = run_exemplars(train_ds, selections, config)
    mining.save_bank(
        bank_from_exemplars(train_ds.feature_dim, exemplars_by_cat),
        os.path.join(out_dir, "exemplars.bank"),
    )

    cluster_results = run_cluster(train_ds, exemplars_by_cat, config)
    kept_by_cat = [kept for kept, _ in cluster_results]
    mining.save_bank(
        bank_from_exemplars(train_ds.feature_dim, exemplars_by_cat, kept_by_cat),
        os.path.join(out_dir, "clustered.bank"),
    )
    write_csv(
        os.path.join(out_dir, "patterns.csv"),
        ["category", "rank", "image_id", "instance", "score"],
        patterns_rows(train_ds, kept_by_cat),
    )

    trained = run_train(train_ds, folds, exemplars_by_cat, kept_by_cat, config)
    bank = bank_from_trained(train_ds.feature_dim, trained)
    mining.save_bank(bank, os.path.join(out_dir, "detectors.bank"))
    write_csv(
        os.path.join(out_dir, "bag_confidence.csv"),
        ["category", "rank", "image_id", "delta"],
        [
            [dataset.categories[det.category], det.rank, bag.image_id,
             fmt(bag.delta)]
            for det in trained
            for bag in det.bag_states
        ],
    )
    if config.trace:
        write_csv(
            os.path.join(out_dir, "traces.csv"),
            ["category", "rank", "iteration", "stage", "objective",
             "mining_rounds", "mining_converged"],
            [
                [dataset.categories[det.category], det.rank, e.iteration,
                 e.stage, fmt(e.objective), e.mining_rounds,
                 str(e.mining_converged).lower()]
                for det in trained
                for e in det.objective_trace
            ],
        )

    W = bank.weight_matrix()
    train_codes, _ = encode.encode_dataset(train_ds, W)
    eval_codes, _ = encode.encode_dataset(eval_ds, W)
    write_codes_csv(os.path.join(out_dir, "codes.csv"), eval_ds, eval_codes)

    train_labels = [im.labels for im in train_ds.images]
    eval_labels = [im.labels for im in eval_ds.images]
    final_C = config.final_C
    if config.tune_final:
        final_C = tune_final_C(
            train_codes, train_labels, dataset.n_categories,
            config.k_folds, config.seed, config.svm_config(),
        )
    models = encode.train_final_classifiers(
        train_codes, train_labels, dataset.n_categories, final_C,
        config.svm_config(),
    )
    eval_scores = encode.category_scores(models, eval_codes)
    acc = encode.accuracy(eval_scores, eval_labels)
    mean_ap, per_ap = encode.mean_average_precision(
        eval_scores, eval_labels, dataset.n_categories
    )

    ranks = np.array([rec.rank for rec in bank.clusters], dtype=np.int64)
    cats = np.array([rec.category for rec in bank.clusters], dtype=np.int64)
    curve = encode.detector_count_curve(
        ranks, cats, train_codes, train_labels, eval_codes, eval_labels,
        dataset.n_categories, final_C, config.svm_config(),
    )
    write_csv(
        os.path.join(out_dir, "curve.csv"),
        ["detectors_per_category", "accuracy"],
        [[m, fmt(a)] for m, a in curve],
    )

    loc_report = run_localize(train_ds, bank, config, out_dir, truth)

    metric_rows = [["accuracy", "", fmt(acc)], ["map", "", fmt(mean_ap)],
                   ["final_C", "", fmt(final_C)]]
    for c, ap in enumerate(per_ap):
        if ap is not None:
            metric_rows.append(["ap", dataset.categories[c], fmt(ap)])
    summary = {
        "accuracy": acc,
        "map": mean_ap,
        "final_C": final_C,
        "n_detectors": len(bank.entries),
        "curve": curve,
    }
    if loc_report is not None:
        for name in sorted(loc_report.per_category):
            metric_rows.append(
                ["corloc", name, fmt(loc_report.per_category[name])]
            )
        metric_rows.append(["corloc_mean", "", fmt(loc_report.overall())])
        summary["corloc"] = loc_report.overall()
    write_csv(
        os.path.join(out_dir, "metrics.csv"),
        ["metric", "category", "value"], metric_rows,
    )

    manifest_lines = [
        f"# run manifest, replayable via --config",
        f"# package_version={__version__}",
        f"# kernel_mode={kernel_mode()}",
        f"# elapsed_seconds={time.time() - t_start:.1f}",
    ]
    if dataset_path is not None:
        manifest_lines.append(f"# dataset={dataset_path}")
        manifest_lines.append(f"# dataset_sha256={dataset_digest(dataset_path)}")
    manifest_lines.append(config.to_text().rstrip("\n"))
    write_atomic(
        os.path.join(out_dir, "run_manifest.txt"),
        "\n".join(manifest_lines) + "\n",
    )
    return summary


def run_localize(train_ds, bank, config, out_dir, truth):
    """Object maps and box hypotheses for every positive training image with
    geometry; scores CorLoc when truth is available."""
    by_cat = {
        c: [m for m, rec in zip(bank.models(), bank.clusters)
            if rec.category == c]
        for c in range(train_ds.n_categories)
    }
    heat_dir = os.path.join(out_dir, "heatmaps")
    if config.save_heatmaps:
        os.makedirs(heat_dir, exist_ok=True)

    tasks = []
    for c in range(train_ds.n_categories):
        if not by_cat[c]:
            continue
        for i in train_ds.positives_of(c):
            if train_ds.images[i].boxes is not None:
                tasks.append((c, i))

    def one(task):
        c, i = task
        heat, _ = object_map_cached(train_ds, i, by_cat[c], config.stride)
        hyp = localize.extract_box(heat, config.fg_threshold)
        return c, i, heat, hyp

    results = parallel_map(one, tasks, config.worker_count())

    rows = []
    hypotheses = []
    for c, i, heat, hyp in results:
        im = train_ds.images[i]
        name = train_ds.categories[c]
        rows.append(
            [im.image_id, name, fmt(hyp.box[0]), fmt(hyp.box[1]),
             fmt(hyp.box[2]), fmt(hyp.box[3]), str(hyp.fallback).lower()]
        )
        hypotheses.append((im.image_id, name, hyp.box))
        if config.save_heatmaps:
            localize.save_pgm(
                heat, os.path.join(heat_dir, f"{name}_{im.image_id}.pgm")
            )
    write_csv(
        os.path.join(out_dir, "boxes.csv"),
        ["image_id", "category", "x0", "y0", "x1", "y1", "fallback"],
        rows,
    )
    if truth is None:
        return None
    gt = {}
    for image_id, rec in truth.images.items():
        if rec["box"] is not None:
            gt[image_id] = [tuple(rec["box"])]
    report = localize.corloc(hypotheses, gt)
    write_csv(
        os.path.join(out_dir, "corloc.csv"),
        ["category", "corloc"],
        [[name, fmt(v)] for name, v in sorted(report.per_category.items())],
    )
    write_csv(
        os.path.join(out_dir, "taxonomy.csv"),
        ["category"] + list(localize.TAXONOMY),
        [
            [name] + [report.taxonomy[name][o] for o in localize.TAXONOMY]
            for name in sorted(report.taxonomy)
        ],
    )
    return report


def object_map_cached(dataset, image, models, stride):
    return localize.object_map(dataset, image, models, stride)


# ---------------------------------------------------------------------------
# ablation

ABLATION_ARMS = ("BL", "KM+MIL", "KM+clsMIL", "PM+MIL", "PM+clsMIL")


def kmeans_init_clusters(dataset, selections, config):
    """k-means alternative to pattern mining: cluster the selected patch
    features directly (k = n_keep, 20 restarts) and seed each cluster with
    its per-image member patch nearest to the centroid.

    Returns per-category (clusters, pseudo-detector list) where the pseudo
    detector of cluster j scores instances by centroid dot product, filling
    the role the summed member response plays for mined clusters.
    """
    from .numerics import LinearModel

    out = []
    for sel in selections:
        feats = np.asarray(
            [
                dataset.instance_feature(dataset.index_of(image_id), m)
                for image_id, m, _ in sel.items
            ]
        )
        k = min(config.n_keep, feats.shape[0])
        labels, centers, _ = mining.kmeans(feats, k, config.seed)
        pseudo = []
        clusters = []
        for j in range(k):
            members = np.nonzero(labels == j)[0]
            d2 = np.sum((feats[members] - centers[j]) ** 2, axis=1)
            best_per_image = {}
            for local, m_idx in enumerate(members):
                image_id, inst, _ = sel.items[m_idx]
                cand = (float(d2[local]), inst)
                if image_id not in best_per_image or cand < best_per_image[image_id]:
                    best_per_image[image_id] = cand
            seeds = sorted(
                (
                    (dist, image_id, inst)
                    for image_id, (dist, inst) in best_per_image.items()
                ),
            )[: config.top_patterns]
            srcs = set(image_id for _, image_id, _ in seeds)
            h = 0.0
            if srcs:
                p = 1.0 / len(srcs)
                h = -len(srcs) * p * np.log2(p)
            clusters.append(
                mining.DetectorCluster(
                    category=sel.category,
                    members=[j],
                    entropy=float(h),
                    seed_patterns=[
                        (image_id, inst, -dist) for dist, image_id, inst in seeds
                    ],
                )
            )
            pseudo.append(LinearModel(np.append(centers[j], 0.0)))
        kept = mining.greedy_select(clusters, k)
        out.append((kept, pseudo))
    return out


def max_pool_codes(dataset):
    """Baseline codes: per-image elementwise max over raw instance features."""
    codes = np.empty((dataset.n_images, dataset.feature_dim))
    for i in range(dataset.n_images):
        codes[i] = dataset.features_of(i).max(axis=0)
    return codes


def _evaluate_codes(train_codes, eval_codes, train_labels, eval_labels,
                    n_categories, config):
    models = encode.train_final_classifiers(
        train_codes, train_labels, n_categories, config.final_C,
        config.svm_config(),
    )
    scores = encode.category_scores(models, eval_codes)
    acc = encode.accuracy(scores, eval_labels)
    mean_ap, _ = encode.mean_average_precision(scores, eval_labels, n_categories)
    return acc, mean_ap


def _delta_stats(trained, truth):
    clean = []
    corrupt = []
    for det in trained:
        for bag in det.bag_states:
            rec = truth.images.get(bag.image_id)
            if rec is None:
                continue
            (corrupt if rec["corrupted"] else clean).append(bag.delta)
    mean_clean = float(np.mean(clean)) if clean else float("nan")
    mean_corrupt = float(np.mean(corrupt)) if corrupt else float("nan")
    return mean_clean, mean_corrupt


def run_ablation_arm(arm, dataset, truth, config):
    """One (arm, dataset) evaluation; returns the metric dict."""
    train_ds, eval_ds = split_eval(dataset, config)
    train_labels = [im.labels for im in train_ds.images]
    eval_labels = [im.labels for im in eval_ds.images]
    n_cat = dataset.n_categories

    if arm == "BL":
        acc, mean_ap = _evaluate_codes(
            max_pool_codes(train_ds), max_pool_codes(eval_ds),
            train_labels, eval_labels, n_cat, config,
        )
        return {"arm": arm, "accuracy": acc, "map": mean_ap,
                "delta_clean": float("nan"), "delta_corrupt": float("nan")}

    folds = make_folds(train_ds, config.k_folds, config.seed)
    selections = run_select(train_ds, folds, config)
    confidence = arm.endswith("clsMIL")

    if arm.startswith("KM"):
        per_cat = kmeans_init_clusters(train_ds, selections, config)
    else:
        exemplars_by_cat = run_exemplars(train_ds, selections, config)
        cluster_results = run_cluster(train_ds, exemplars_by_cat, config)
        per_cat = [
            (kept, exemplars_by_cat[g])
            for g, (kept, _) in enumerate(cluster_results)
        ]

    mil_config = config.clsmil_config(confidence=confidence)
    tasks = []
    for kept, detectors in per_cat:
        if not kept:
            continue
        category = kept[0].category
        pools = clsmil.build_negative_pools(train_ds, folds, category)
        for cluster in kept:
            tasks.append((cluster, detectors, pools))

    def one(task):
        cluster, detectors, pools = task
        return clsmil.train_cls_mil(
            train_ds, folds, cluster, detectors, mil_config, pools
        )

    trained = parallel_map(one, tasks, config.worker_count())
    trained.sort(key=lambda det: (det.category, det.rank))
    bank = bank_from_trained(train_ds.feature_dim, trained)
    W = bank.weight_matrix()
    train_codes, _ = encode.encode_dataset(train_ds, W)
    eval_codes, _ = encode.encode_dataset(eval_ds, W)
    acc, mean_ap = _evaluate_codes(
        train_codes, eval_codes, train_labels, eval_labels, n_cat, config
    )
    delta_clean, delta_corrupt = (
        _delta_stats(trained, truth) if truth is not None
        else (float("nan"), float("nan"))
    )
    return {"arm": arm, "accuracy": acc, "map": mean_ap,
            "delta_clean": delta_clean, "delta_corrupt": delta_corrupt}


def run_ablation(config, out_dir, seeds, arms=ABLATION_ARMS):
    """Paired comparison of initialization (k-means vs mined patterns) and
    training (plain MIL vs confidence-weighted) over several seeds.

    Each seed generates one corrupted planted dataset shared by every arm.
    Writes ablation.csv and returns the row dicts.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for seed in seeds:
        spec = config.synth_spec(seed=seed)
        dataset, truth = synth.generate(spec)
        run_cfg = dataclasses.replace(config, seed=seed)
        for arm in arms:
            result = run_ablation_arm(arm, dataset, truth, run_cfg)
            result["seed"] = seed
            rows.append(result)
    write_csv(
        os.path.join(out_dir, "ablation.csv"),
        ["seed", "arm", "accuracy", "map", "delta_clean", "delta_corrupt"],
        [
            [r["seed"], r["arm"], fmt(r["accuracy"]), fmt(r["map"]),
             fmt(r["delta_clean"]), fmt(r["delta_corrupt"])]
            for r in rows
        ],
    )
    return rows
