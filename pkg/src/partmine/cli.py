"""Command-line interface.

Every subcommand resolves one PipelineConfig from defaults, an optional
--config file, repeated --set key=value overrides, and the convenience
flags, then runs its stage and writes artifacts into --out.  Exit status is
0 on success, 1 on a runtime failure (one structured line on stderr), and 2
for usage errors (argparse).
"""

import argparse
import os
import sys

from . import clsmil, encode, exemplar, mining, patchsel, pipeline, synth
from .dataset import load_dataset, make_folds, save_dataset
from .errors import PartmineError
from .numerics import LinearModel, fit_whitening
from .synth import SynthTruth


def build_parser():
    parser = argparse.ArgumentParser(
        prog="partmine",
        description="Mine discriminative part detectors from bag-labeled "
        "feature data, encode images with them, and localize objects.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        if dataset:
            p.add_argument("--dataset", required=True,
                           help="path to the dataset manifest JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--jobs", type=int,
                       help="parallel workers (0 = one per CPU)")

    p = sub.add_parser("synth", help="generate a planted-pattern dataset")
    common(p, dataset=False)

    p = sub.add_parser("select", help="select discriminative patches")
    common(p)

    p = sub.add_parser("exemplars", help="train and augment exemplar detectors")
    common(p)
    p.add_argument("--selections", required=True, help="selections.csv path")

    p = sub.add_parser("cluster", help="cluster exemplars and mine patterns")
    common(p)
    p.add_argument("--exemplars", required=True, help="exemplars.bank path")

    p = sub.add_parser("train", help="train detectors with cls-MIL")
    common(p)
    p.add_argument("--clustered", required=True, help="clustered.bank path")
    p.add_argument("--patterns", required=True, help="patterns.csv path")
    p.add_argument("--trace", action="store_true",
                   help="write per-solve objective traces")

    p = sub.add_parser("encode", help="encode images as detector responses")
    common(p)
    p.add_argument("--bank", required=True, help="detectors.bank path")

    p = sub.add_parser("classify", help="train/evaluate final classifiers")
    common(p)
    p.add_argument("--bank", required=True, help="detectors.bank path")
    p.add_argument("--tune", action="store_true",
                   help="cross-validate the final C over {0.1, 1, 10}")

    p = sub.add_parser("localize", help="heat maps and box hypotheses")
    common(p)
    p.add_argument("--bank", required=True, help="detectors.bank path")
    p.add_argument("--truth", help="planted-truth JSON for CorLoc scoring")
    p.add_argument("--save-heatmaps", action="store_true",
                   help="write one PGM per (category, image)")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    common(p)
    p.add_argument("--truth", help="planted-truth JSON for CorLoc scoring")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--tune", action="store_true")
    p.add_argument("--save-heatmaps", action="store_true")

    p = sub.add_parser("ablation",
                       help="compare initialization and training variants")
    common(p, dataset=False)
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma-separated seeds, one dataset per seed")
    p.add_argument("--arms", default=",".join(pipeline.ABLATION_ARMS),
                   help="comma-separated arm names")
    return parser


def resolve_config(args):
    cfg = pipeline.PipelineConfig()
    if args.config:
        cfg = pipeline.PipelineConfig.from_file(args.config, base=cfg)
    items = []
    for pair in args.set:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        items.append((key.strip(), raw.strip()))
    cfg = pipeline.PipelineConfig.from_items(items, base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if getattr(args, "trace", False):
        cfg.trace = True
    if getattr(args, "tune", False):
        cfg.tune_final = True
    if getattr(args, "save_heatmaps", False):
        cfg.save_heatmaps = True
    return cfg


def _load_exemplars_from_bank(bank):
    """Rebuild per-category exemplar detector lists from a bank file."""
    by_cat = {}
    for entry in bank.entries:
        det = exemplar.ExemplarDetector(
            model=LinearModel(entry.weights),
            category=entry.category,
            source=(entry.source_image_id, entry.source_instance),
            positives=[(entry.source_image_id, entry.source_instance)],
        )
        by_cat.setdefault(entry.category, []).append(det)
    return [by_cat[c] for c in sorted(by_cat)]


def cmd_synth(args, cfg):
    spec = cfg.synth_spec()
    dataset, truth = synth.generate(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(dataset, os.path.join(args.out, "dataset.json"))
    truth.save(os.path.join(args.out, "truth.json"))
    print(
        f"wrote {dataset.n_images} images, {dataset.features.shape[0]} "
        f"instances, dim {dataset.feature_dim} to {args.out}"
    )
    return 0


def cmd_select(args, cfg):
    dataset = load_dataset(args.dataset)
    folds = make_folds(dataset, cfg.k_folds, cfg.seed)
    selections = pipeline.run_select(dataset, folds, cfg)
    os.makedirs(args.out, exist_ok=True)
    patchsel.selections_to_csv(
        selections, dataset, os.path.join(args.out, "selections.csv")
    )
    total = sum(len(s.items) for s in selections)
    print(f"selected {total} patches across {dataset.n_categories} categories")
    return 0


def cmd_exemplars(args, cfg):
    dataset = load_dataset(args.dataset)
    selections = patchsel.selections_from_csv(args.selections, dataset)
    exemplars_by_cat = pipeline.run_exemplars(dataset, selections, cfg)
    os.makedirs(args.out, exist_ok=True)
    mining.save_bank(
        pipeline.bank_from_exemplars(dataset.feature_dim, exemplars_by_cat),
        os.path.join(args.out, "exemplars.bank"),
    )
    total = sum(len(dets) for dets in exemplars_by_cat)
    print(f"trained {total} exemplar detectors")
    return 0


def cmd_cluster(args, cfg):
    dataset = load_dataset(args.dataset)
    bank = mining.load_bank(args.exemplars)
    exemplars_by_cat = _load_exemplars_from_bank(bank)
    results = pipeline.run_cluster(dataset, exemplars_by_cat, cfg)
    kept_by_cat = [kept for kept, _ in results]
    os.makedirs(args.out, exist_ok=True)
    mining.save_bank(
        pipeline.bank_from_exemplars(
            dataset.feature_dim, exemplars_by_cat, kept_by_cat
        ),
        os.path.join(args.out, "clustered.bank"),
    )
    pipeline.write_csv(
        os.path.join(args.out, "patterns.csv"),
        ["category", "rank", "image_id", "instance", "score"],
        pipeline.patterns_rows(dataset, kept_by_cat),
    )
    kept = sum(len(k) for k in kept_by_cat)
    print(f"kept {kept} clusters")
    return 0


def cmd_train(args, cfg):
    dataset = load_dataset(args.dataset)
    bank = mining.load_bank(args.clustered)
    kept = pipeline.clusters_from_patterns_csv(args.patterns, dataset, bank)
    folds = make_folds(dataset, cfg.k_folds, cfg.seed)
    models = bank.models()
    entries = bank.entries
    by_cat = {}
    for cluster in kept:
        by_cat.setdefault(cluster.category, []).append(cluster)

    mil_config = cfg.clsmil_config(confidence=True)
    tasks = []
    for c in sorted(by_cat):
        det_idx = bank.category_entries(c)
        remap = {g: t for t, g in enumerate(det_idx)}
        detectors = [models[g] for g in det_idx]
        pools = clsmil.build_negative_pools(dataset, folds, c)
        for cluster in by_cat[c]:
            cluster = mining.DetectorCluster(
                category=cluster.category,
                members=[remap[m] for m in cluster.members],
                entropy=cluster.entropy,
                rank=cluster.rank,
                seed_patterns=cluster.seed_patterns,
            )
            tasks.append((cluster, detectors, pools))

    def one(task):
        cluster, detectors, pools = task
        return clsmil.train_cls_mil(
            dataset, folds, cluster, detectors, mil_config, pools
        )

    trained = pipeline.parallel_map(one, tasks, cfg.worker_count())
    trained.sort(key=lambda det: (det.category, det.rank))
    os.makedirs(args.out, exist_ok=True)
    out_bank = pipeline.bank_from_trained(dataset.feature_dim, trained)
    mining.save_bank(out_bank, os.path.join(args.out, "detectors.bank"))
    pipeline.write_csv(
        os.path.join(args.out, "bag_confidence.csv"),
        ["category", "rank", "image_id", "delta"],
        [
            [dataset.categories[det.category], det.rank, bag.image_id,
             pipeline.fmt(bag.delta)]
            for det in trained
            for bag in det.bag_states
        ],
    )
    if cfg.trace:
        pipeline.write_csv(
            os.path.join(args.out, "traces.csv"),
            ["category", "rank", "iteration", "stage", "objective",
             "mining_rounds", "mining_converged"],
            [
                [dataset.categories[det.category], det.rank, e.iteration,
                 e.stage, pipeline.fmt(e.objective), e.mining_rounds,
                 str(e.mining_converged).lower()]
                for det in trained
                for e in det.objective_trace
            ],
        )
    print(f"trained {len(trained)} detectors")
    return 0


def cmd_encode(args, cfg):
    dataset = load_dataset(args.dataset)
    bank = mining.load_bank(args.bank)
    codes, _ = encode.encode_dataset(dataset, bank.weight_matrix())
    os.makedirs(args.out, exist_ok=True)
    pipeline.write_codes_csv(
        os.path.join(args.out, "codes.csv"), dataset, codes
    )
    print(f"encoded {dataset.n_images} images with {len(bank.entries)} detectors")
    return 0


def cmd_classify(args, cfg):
    dataset = load_dataset(args.dataset)
    bank = mining.load_bank(args.bank)
    train_ds, eval_ds = pipeline.split_eval(dataset, cfg)
    W = bank.weight_matrix()
    train_codes, _ = encode.encode_dataset(train_ds, W)
    eval_codes, _ = encode.encode_dataset(eval_ds, W)
    train_labels = [im.labels for im in train_ds.images]
    eval_labels = [im.labels for im in eval_ds.images]
    final_C = cfg.final_C
    if cfg.tune_final:
        final_C = pipeline.tune_final_C(
            train_codes, train_labels, dataset.n_categories, cfg.k_folds,
            cfg.seed, cfg.svm_config(),
        )
    models = encode.train_final_classifiers(
        train_codes, train_labels, dataset.n_categories, final_C,
        cfg.svm_config(),
    )
    scores = encode.category_scores(models, eval_codes)
    acc = encode.accuracy(scores, eval_labels)
    mean_ap, per_ap = encode.mean_average_precision(
        scores, eval_labels, dataset.n_categories
    )
    os.makedirs(args.out, exist_ok=True)
    rows = [["accuracy", "", pipeline.fmt(acc)],
            ["map", "", pipeline.fmt(mean_ap)],
            ["final_C", "", pipeline.fmt(final_C)]]
    for c, ap in enumerate(per_ap):
        if ap is not None:
            rows.append(["ap", dataset.categories[c], pipeline.fmt(ap)])
    pipeline.write_csv(
        os.path.join(args.out, "metrics.csv"),
        ["metric", "category", "value"], rows,
    )
    print(f"accuracy {acc:.4f}  mAP {mean_ap:.4f}")
    return 0


def cmd_localize(args, cfg):
    dataset = load_dataset(args.dataset)
    bank = mining.load_bank(args.bank)
    truth = SynthTruth.load(args.truth) if args.truth else None
    os.makedirs(args.out, exist_ok=True)
    report = pipeline.run_localize(dataset, bank, cfg, args.out, truth)
    if report is not None:
        print(f"CorLoc {report.overall():.4f}")
    else:
        print("wrote box hypotheses (no truth given, CorLoc not scored)")
    return 0


def cmd_pipeline(args, cfg):
    dataset = load_dataset(args.dataset)
    truth = SynthTruth.load(args.truth) if args.truth else None
    summary = pipeline.run_pipeline(
        dataset, cfg, args.out, truth=truth, dataset_path=args.dataset
    )
    line = (
        f"accuracy {summary['accuracy']:.4f}  mAP {summary['map']:.4f}  "
        f"detectors {summary['n_detectors']}"
    )
    if "corloc" in summary:
        line += f"  CorLoc {summary['corloc']:.4f}"
    print(line)
    return 0


def cmd_ablation(args, cfg):
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    for arm in arms:
        if arm not in pipeline.ABLATION_ARMS:
            raise ValueError(
                f"unknown arm '{arm}'; choose from {pipeline.ABLATION_ARMS}"
            )
    rows = pipeline.run_ablation(cfg, args.out, seeds, arms)
    for r in rows:
        print(
            f"seed {r['seed']:>3}  {r['arm']:<10} accuracy {r['accuracy']:.4f}"
            f"  mAP {r['map']:.4f}"
        )
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "select": cmd_select,
    "exemplars": cmd_exemplars,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "encode": cmd_encode,
    "classify": cmd_classify,
    "localize": cmd_localize,
    "pipeline": cmd_pipeline,
    "ablation": cmd_ablation,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](args, cfg)
    except (PartmineError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
