"""Mid-level image codes and the final category classifiers.

An image's code has one slot per detector: the exact maximum response over
the bag's instances (ties resolve to the lowest instance index, recorded as
the argmax region).  One-vs-all linear SVMs on the codes give category
scores; evaluation offers single-label accuracy and all-points mean average
precision.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .numerics import LinearModel, SvmConfig, train_linear_svm


@dataclass
class MidLevelCode:
    """Per-detector max responses and the instance that produced each."""

    values: np.ndarray
    argmax: np.ndarray


def encode_image(dataset, image, weight_matrix):
    """Code for one image under a (K, d + 1) detector weight matrix."""
    W = np.asarray(weight_matrix, dtype=np.float64)
    R = dataset.features_of(image) @ W[:, :-1].T + W[:, -1]
    argmax = np.argmax(R, axis=0)
    return MidLevelCode(
        values=R[argmax, np.arange(W.shape[0])],
        argmax=argmax.astype(np.int64),
    )


def encode_dataset(dataset, weight_matrix):
    """Codes for every image: (n_images, K) values and argmax matrices."""
    W = np.asarray(weight_matrix, dtype=np.float64)
    R = dataset.features @ W[:, :-1].T + W[:, -1]
    values = np.empty((dataset.n_images, W.shape[0]))
    argmax = np.empty((dataset.n_images, W.shape[0]), dtype=np.int64)
    for i, im in enumerate(dataset.images):
        block = R[im.start : im.stop]
        argmax[i] = np.argmax(block, axis=0)
        values[i] = block[argmax[i], np.arange(W.shape[0])]
    return values, argmax


def train_final_classifiers(codes, labels, n_categories, C=1.0, config=None):
    """One-vs-all linear SVMs over mid-level codes.

    ``labels`` is a sequence of per-image label tuples.  Raises DataError
    when a category has no positive or no negative training image.
    """
    config = config or SvmConfig()
    codes = np.asarray(codes, dtype=np.float64)
    aug = np.concatenate([codes, np.ones((codes.shape[0], 1))], axis=1)
    models = []
    for c in range(n_categories):
        y = np.array([1.0 if c in ls else -1.0 for ls in labels])
        n_pos = int(np.sum(y > 0))
        if n_pos == 0:
            raise DataError(f"category {c} has no positive training image")
        if n_pos == y.shape[0]:
            raise DataError(f"category {c} has no negative training image")
        sol = train_linear_svm(aug, y, C, config)
        models.append(LinearModel(sol.weights))
    return models


def category_scores(models, codes):
    """(n_images, n_categories) response matrix."""
    codes = np.asarray(codes, dtype=np.float64)
    return np.stack([m.response(codes) for m in models], axis=1)


def accuracy(scores, labels):
    """Fraction of single-label images whose top-scoring category matches.

    Images with zero or multiple labels are skipped; ties in the scores
    resolve to the lowest category index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    total = 0
    hits = 0
    for i, ls in enumerate(labels):
        if len(ls) != 1:
            continue
        total += 1
        if int(np.argmax(scores[i])) == ls[0]:
            hits += 1
    if total == 0:
        raise DataError("no single-label images to score")
    return hits / total


def average_precision(scores, positives):
    """All-points average precision.

    Ranks descending by score with ties broken by index, builds the
    precision-recall curve, makes precision monotone non-increasing from the
    right, and sums precision at each recall step.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    npos = int(positives.sum())
    if npos == 0:
        raise DataError("average precision undefined without positives")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    flags = positives[order]
    tp = np.cumsum(flags)
    ranks = np.arange(1, scores.shape[0] + 1)
    precision = tp / ranks
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(precision[flags]) / npos)


def mean_average_precision(scores, labels, n_categories):
    """Mean AP across categories; a category without positives is excluded
    with a warning.  Returns (mAP, per-category list with None for the
    excluded ones)."""
    scores = np.asarray(scores, dtype=np.float64)
    per_category = []
    kept = []
    for c in range(n_categories):
        positives = np.array([c in ls for ls in labels], dtype=bool)
        if not positives.any():
            warnings.warn(
                f"category {c} has no positives; excluded from mAP",
                stacklevel=2,
            )
            per_category.append(None)
            continue
        ap = average_precision(scores[:, c], positives)
        per_category.append(ap)
        kept.append(ap)
    if not kept:
        raise DataError("no category had positives; mAP undefined")
    return float(np.mean(kept)), per_category


def detector_count_curve(ranks, categories, train_codes, train_labels,
                         eval_codes, eval_labels, n_categories, C=1.0,
                         config=None):
    """Accuracy as a function of detectors kept per category.

    ``ranks``/``categories`` give each code column's keep rank and category.
    For m = 1..max_rank+1, keep columns with rank < m, retrain the final
    classifiers, and score accuracy on the eval codes.  Returns a list of
    (m, accuracy).
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    top = int(ranks.max()) + 1 if ranks.size else 0
    curve = []
    for m in range(1, top + 1):
        cols = np.nonzero(ranks < m)[0]
        models = train_final_classifiers(
            train_codes[:, cols], train_labels, n_categories, C, config
        )
        acc = accuracy(category_scores(models, eval_codes[:, cols]), eval_labels)
        curve.append((m, acc))
    return curve
