"""Confidence-weighted sparse multiple-instance detector training.

Each positive bag carries latent state: a witness set of at most s_max
instances, sigmoid witness weights, the weighted-average bag feature, and a
bag confidence.  Training alternates for a fixed number of iterations:

* Optimizing - with latents frozen, train one cost-weighted SVM per fold on
  the bags outside that fold (bag features as positives, every instance of
  negative images as the negative pool, mined hard); the per-bag positive
  cost is C times the bag's confidence, so unreliable bags pull less.
* Updating - re-score each bag with the model whose training excluded the
  bag's fold, re-pick witnesses, re-weight, and recompute the confidence.

A final Optimizing pass over all bags and all negatives yields the detector.
The plain MIL baseline is the same loop with confidences pinned to one and a
single witness.
"""

from dataclasses import dataclass, field

import numpy as np

from .mining import cluster_direction
from .numerics import (
    LinearModel,
    SvmConfig,
    sigmoid,
    train_svm_hard_negative,
)


@dataclass
class BagState:
    """Latent state of one positive bag."""

    image_index: int
    image_id: str
    witness: np.ndarray    # instance indices, best first
    weights: np.ndarray    # witness weights, aligned with witness
    phi: np.ndarray        # weighted-average bag feature (d,)
    delta: float           # bag confidence


@dataclass
class ClsMilConfig:
    iterations: int = 3
    s_max: int = 10
    C: float = 1.0
    confidence: bool = True  # False: plain MIL (delta = 1, single witness)
    svm: SvmConfig = field(default_factory=SvmConfig)

    def effective_s_max(self):
        return self.s_max if self.confidence else 1


@dataclass
class TraceEntry:
    iteration: int     # 1-based; the final pass repeats the last iteration
    stage: str         # "fold0".."fold{k-1}" or "final"
    objective: float   # full-pool primal objective of that solve
    mining_rounds: int
    mining_converged: bool


@dataclass
class TrainedDetector:
    """A detector produced by the MIL loop, with its provenance and the
    diagnostics needed to audit the optimization."""

    model: LinearModel
    category: int
    rank: int
    entropy: float
    source: tuple                  # top seed pattern (image_id, instance)
    objective_trace: list
    bag_states: list               # states that parameterized the final pass
    fold_models_history: list      # [iteration][fold] -> LinearModel


@dataclass
class NegativePools:
    """Bias-augmented negative instances for one category: the full pool and
    one complement pool per fold, all in manifest order."""

    full: np.ndarray
    by_fold: list


def build_negative_pools(dataset, folds, category):
    neg_images = dataset.negatives_of(category)
    blocks = [dataset.augmented_of(i) for i in neg_images]
    fold_ids = np.concatenate(
        [
            np.full(
                dataset.images[i].n_instances,
                folds.fold_of(dataset.images[i].image_id),
                dtype=np.int64,
            )
            for i in neg_images
        ]
    ) if neg_images else np.empty(0, dtype=np.int64)
    full = (
        np.concatenate(blocks, axis=0)
        if blocks
        else np.empty((0, dataset.feature_dim + 1))
    )
    by_fold = [
        np.ascontiguousarray(full[fold_ids != j]) for j in range(folds.k)
    ]
    return NegativePools(full=np.ascontiguousarray(full), by_fold=by_fold)


def init_bag_states(dataset, cluster, detectors):
    """Initial latents for every positive bag of the cluster's category.

    A bag holding one of the cluster's seed patterns starts with that
    pattern as its sole witness at weight 1 and confidence 1; any other
    positive bag starts from its best instance under the summed member
    response, at confidence 0.5.
    """
    seeds = {image_id: m for image_id, m, _ in cluster.seed_patterns}
    combined = LinearModel(cluster_direction(detectors, cluster.members))
    states = []
    for i in dataset.positives_of(cluster.category):
        im = dataset.images[i]
        if im.image_id in seeds:
            m = seeds[im.image_id]
            delta = 1.0
        else:
            scores = combined.response(dataset.features_of(i))
            m = int(np.argmax(scores))
            delta = 0.5
        states.append(
            BagState(
                image_index=i,
                image_id=im.image_id,
                witness=np.array([m], dtype=np.int64),
                weights=np.array([1.0]),
                phi=dataset.instance_feature(i, m).copy(),
                delta=delta,
            )
        )
    return states


def update_latents(bags, dataset, model_for_bag, s_max):
    """Re-derive every bag's latents from its held-out model.

    Witnesses are the min(s_max, bag size) highest-response instances, ties
    to the lower index; weights are sigmoid responses; the bag feature is
    the weight-normalized average; the confidence is the sigmoid of the bag
    feature's own response.  Returns new states.
    """
    updated = []
    for b, bag in enumerate(bags):
        model = model_for_bag(b)
        F = dataset.features_of(bag.image_index)
        scores = model.response(F)
        order = np.argsort(-scores, kind="stable")
        witness = order[: min(s_max, order.shape[0])].astype(np.int64)
        weights = sigmoid(scores[witness])
        phi = (weights @ F[witness]) / weights.sum()
        delta = float(sigmoid(float(model.response(phi))))
        updated.append(
            BagState(
                image_index=bag.image_index,
                image_id=bag.image_id,
                witness=witness,
                weights=weights,
                phi=phi,
                delta=delta,
            )
        )
    return updated


def optimize_detector(bags, negatives, config):
    """One Optimizing solve: bag features against a negative instance pool.

    Positive costs are C * delta (or plain C without confidence weighting);
    negative costs are C.  Returns the MiningResult.
    """
    d = bags[0].phi.shape[0] if bags else negatives.shape[1] - 1
    X_pos = np.ones((len(bags), d + 1))
    for t, bag in enumerate(bags):
        X_pos[t, :-1] = bag.phi
    if config.confidence:
        pos_cost = np.array([config.C * bag.delta for bag in bags])
    else:
        pos_cost = np.full(len(bags), config.C)
    return train_svm_hard_negative(
        X_pos, pos_cost, negatives, config.C, config.svm
    )


def train_cls_mil(dataset, folds, cluster, detectors, config=None, pools=None):
    """Run the full alternating loop for one cluster and return the trained
    detector.

    ``detectors`` are the category's exemplar detectors (for seedless-bag
    initialization).  The reported bag states are the ones that
    parameterized the final pass, i.e. the output of the last Updating step.
    """
    config = config or ClsMilConfig()
    if pools is None:
        pools = build_negative_pools(dataset, folds, cluster.category)
    bags = init_bag_states(dataset, cluster, detectors)
    if not config.confidence:
        bags = [
            BagState(
                image_index=b.image_index,
                image_id=b.image_id,
                witness=b.witness,
                weights=b.weights,
                phi=b.phi,
                delta=1.0,
            )
            for b in bags
        ]
    bag_fold = np.array(
        [folds.fold_of(bag.image_id) for bag in bags], dtype=np.int64
    )
    s_max = config.effective_s_max()
    trace = []
    history = []

    last_iteration = 0
    for iteration in range(1, config.iterations + 1):
        last_iteration = iteration
        fold_models = []
        for j in range(folds.k):
            members = [bags[b] for b in range(len(bags)) if bag_fold[b] != j]
            result = optimize_detector(members, pools.by_fold[j], config)
            fold_models.append(result.model)
            trace.append(
                TraceEntry(
                    iteration=iteration,
                    stage=f"fold{j}",
                    objective=result.objective,
                    mining_rounds=result.rounds,
                    mining_converged=result.converged,
                )
            )
        history.append(fold_models)
        bags = update_latents(
            bags, dataset, lambda b: fold_models[bag_fold[b]], s_max
        )
        if not config.confidence:
            for bag in bags:
                bag.delta = 1.0

    final = optimize_detector(bags, pools.full, config)
    trace.append(
        TraceEntry(
            iteration=last_iteration + 1,
            stage="final",
            objective=final.objective,
            mining_rounds=final.rounds,
            mining_converged=final.converged,
        )
    )
    source = (
        (cluster.seed_patterns[0][0], cluster.seed_patterns[0][1])
        if cluster.seed_patterns
        else ("", -1)
    )
    return TrainedDetector(
        model=final.model,
        category=cluster.category,
        rank=cluster.rank,
        entropy=cluster.entropy,
        source=source,
        objective_trace=trace,
        bag_states=bags,
        fold_models_history=history,
    )


def train_mil_baseline(dataset, folds, cluster, detectors, config=None,
                       pools=None):
    """Plain MIL: single-witness bags, confidences pinned to one."""
    base = config or ClsMilConfig()
    plain = ClsMilConfig(
        iterations=base.iterations,
        s_max=base.s_max,
        C=base.C,
        confidence=False,
        svm=base.svm,
    )
    return train_cls_mil(dataset, folds, cluster, detectors, plain, pools)
