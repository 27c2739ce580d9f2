"""Exemplar detectors: one closed-form detector per selected patch, grown by
a few rounds of augmentation.

Each round scans the detector's category images that have not yet
contributed a positive, takes the best-responding instance per image, and
absorbs the top_k of those into the positive set (so the set keeps at most
one patch per image); the detector is then re-derived from the enlarged
positive mean. Augmentation for a whole category is batched into matrix
products, and the single-detector entry point delegates to the batched one,
so both produce identical results.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import LinearModel, lda_detector, lda_directions


@dataclass
class ExemplarDetector:
    """A patch detector and the provenance of its positive set."""

    model: LinearModel
    category: int
    source: tuple  # (image_id, instance)
    positives: list = field(default_factory=list)  # [(image_id, instance), ...]


def train_exemplar(whitening, dataset, category, image_id, instance):
    """Closed-form detector seeded from a single patch."""
    i = dataset.index_of(image_id)
    feat = dataset.instance_feature(i, instance)
    return ExemplarDetector(
        model=lda_detector(whitening, feat),
        category=category,
        source=(image_id, instance),
        positives=[(image_id, instance)],
    )


def train_exemplars(whitening, dataset, selection):
    """One exemplar per selected patch, selection order preserved."""
    feats = np.asarray(
        [
            dataset.instance_feature(dataset.index_of(image_id), m)
            for image_id, m, _ in selection.items
        ]
    )
    directions = lda_directions(whitening, feats)
    return [
        ExemplarDetector(
            model=LinearModel(np.append(directions[t], 0.0)),
            category=selection.category,
            source=(image_id, m),
            positives=[(image_id, m)],
        )
        for t, (image_id, m, _) in enumerate(selection.items)
    ]


def augment_exemplars(whitening, detectors, dataset, rounds=2, top_k=5):
    """Grow every detector's positive set for ``rounds`` rounds.

    Candidates are ranked by (response, image_id, instance) with the
    response descending; ties fall to the lexicographically smaller image
    and then the lower instance index. Returns new detector objects; inputs
    are untouched.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    if rounds < 0:
        raise ValueError(f"rounds must be nonnegative, got {rounds}")
    if not detectors:
        return []

    categories = sorted(set(det.category for det in detectors))
    state = [
        {
            "category": det.category,
            "source": det.source,
            "positives": list(det.positives),
            "sum": _positive_sum(dataset, det.positives),
            "direction": det.model.direction.copy(),
        }
        for det in detectors
    ]

    for _ in range(rounds):
        for c in categories:
            rows = [t for t, s in enumerate(state) if s["category"] == c]
            _augment_round(whitening, state, rows, dataset, c, top_k)

    return [
        ExemplarDetector(
            model=LinearModel(np.append(s["direction"], 0.0)),
            category=s["category"],
            source=s["source"],
            positives=s["positives"],
        )
        for s in state
    ]


def augment_exemplar(whitening, detector, dataset, rounds=2, top_k=5):
    """Single-detector augmentation; same arithmetic as the batched path."""
    return augment_exemplars(whitening, [detector], dataset, rounds, top_k)[0]


def _positive_sum(dataset, positives):
    total = np.zeros(dataset.feature_dim)
    for image_id, m in positives:
        total += dataset.instance_feature(dataset.index_of(image_id), m)
    return total


def _augment_round(whitening, state, rows, dataset, category, top_k):
    pos_images = dataset.positives_of(category)
    if not pos_images:
        return
    # lexicographic rank of each candidate image for tie-breaking
    id_rank = {
        img: r
        for r, img in enumerate(
            sorted(dataset.images[i].image_id for i in pos_images)
        )
    }
    W = np.asarray([state[t]["direction"] for t in rows])
    n_det = W.shape[0]
    best_val = np.empty((n_det, len(pos_images)))
    best_idx = np.empty((n_det, len(pos_images)), dtype=np.int64)
    for col, i in enumerate(pos_images):
        scores = W @ dataset.features_of(i).T
        best_idx[:, col] = np.argmax(scores, axis=1)
        best_val[:, col] = scores[np.arange(n_det), best_idx[:, col]]
    ranks = np.array(
        [id_rank[dataset.images[i].image_id] for i in pos_images]
    )

    for t_local, t in enumerate(rows):
        used = set(img for img, _ in state[t]["positives"])
        avail = np.array(
            [dataset.images[i].image_id not in used for i in pos_images]
        )
        cols = np.nonzero(avail)[0]
        if cols.shape[0] == 0:
            continue
        order = np.lexsort(
            (best_idx[t_local, cols], ranks[cols], -best_val[t_local, cols])
        )
        for col in cols[order[:top_k]]:
            i = pos_images[col]
            m = int(best_idx[t_local, col])
            state[t]["positives"].append((dataset.images[i].image_id, m))
            state[t]["sum"] += dataset.instance_feature(i, m)

    means = np.asarray(
        [state[t]["sum"] / len(state[t]["positives"]) for t in rows]
    )
    directions = lda_directions(whitening, means)
    for t_local, t in enumerate(rows):
        state[t]["direction"] = directions[t_local]
