"""Discriminative patch selection.

For one category, k bag-level classifiers are trained on sum-pooled
features, each with one fold held out.  A positive image contributes
candidate patches only when its held-out classifier gets the bag right
(pooled response above zero), and then only instances whose own response
clears the threshold, best-first, capped per image.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataset import write_atomic
from .errors import DataError
from .numerics import LinearModel, SvmConfig, train_linear_svm


@dataclass
class CategoryClassifiers:
    """One bag classifier per fold; ``models[j]`` was trained with fold j
    held out."""

    category: int
    models: list


@dataclass
class PatchSelection:
    """Selected (image_id, instance, score) triples for one category, in
    manifest order, best-first within an image."""

    category: int
    tau: float
    items: list = field(default_factory=list)

    def by_image(self):
        grouped = {}
        for image_id, instance, score in self.items:
            grouped.setdefault(image_id, []).append((instance, score))
        return grouped


def train_fold_classifiers(dataset, folds, category, C=1.0, config=None,
                           pooled=None):
    """Train the k held-out bag classifiers for one category.

    Raises DataError when some training split lacks a positive (or a
    negative) example of the category.
    """
    config = config or SvmConfig()
    if pooled is None:
        pooled = dataset.pooled_matrix()
    aug = np.concatenate([pooled, np.ones((pooled.shape[0], 1))], axis=1)
    labels = np.array(
        [im.has_label(category) for im in dataset.images], dtype=bool
    )
    fold_ids = np.array(
        [folds.fold_of(im.image_id) for im in dataset.images], dtype=np.int64
    )
    name = dataset.categories[category]
    models = []
    for j in range(folds.k):
        train = fold_ids != j
        n_pos = int(np.sum(labels & train))
        n_neg = int(np.sum(~labels & train))
        if n_pos == 0:
            raise DataError(
                f"category '{name}': no positive images outside fold {j}"
            )
        if n_neg == 0:
            raise DataError(
                f"category '{name}': no negative images outside fold {j}"
            )
        y = np.where(labels[train], 1.0, -1.0)
        sol = train_linear_svm(aug[train], y, C, config)
        models.append(LinearModel(sol.weights))
    return CategoryClassifiers(category=category, models=models)


def select_patches(dataset, folds, classifiers, tau=1.0, per_image_cap=50):
    """Pick high-response instances from correctly classified positive bags.

    An instance survives when its held-out classifier response exceeds
    ``tau``; at most ``per_image_cap`` per image, descending response, ties
    toward the lower instance index.
    """
    category = classifiers.category
    items = []
    for i in dataset.positives_of(category):
        im = dataset.images[i]
        model = classifiers.models[folds.fold_of(im.image_id)]
        if float(model.response(dataset.sum_pool(i))) <= 0.0:
            continue
        scores = model.response(dataset.features_of(i))
        keep = np.nonzero(scores > tau)[0]
        if keep.shape[0] == 0:
            continue
        order = keep[np.argsort(-scores[keep], kind="stable")]
        for m in order[:per_image_cap]:
            items.append((im.image_id, int(m), float(scores[m])))
    return PatchSelection(category=category, tau=tau, items=items)


def cap_selection(selection, limit):
    """Keep at most ``limit`` patches, highest scores first (ties by
    image_id then instance); order of survivors is preserved."""
    if limit is None or len(selection.items) <= limit:
        return selection
    ranked = sorted(
        selection.items, key=lambda t: (-t[2], t[0], t[1])
    )[:limit]
    kept = set((im, m) for im, m, _ in ranked)
    items = [t for t in selection.items if (t[0], t[1]) in kept]
    return PatchSelection(
        category=selection.category, tau=selection.tau, items=items
    )


def selections_to_csv(selections, dataset, path=None):
    """Serialize one or more PatchSelection objects to CSV; returns the text
    and optionally writes it atomically."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "image_id", "instance", "score"])
    for sel in selections:
        name = dataset.categories[sel.category]
        for image_id, instance, score in sel.items:
            writer.writerow([name, image_id, instance, repr(float(score))])
    text = buf.getvalue()
    if path is not None:
        write_atomic(path, text)
    return text


def selections_from_csv(path, dataset):
    """Inverse of ``selections_to_csv``; rows keep their file order."""
    by_cat = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["category", "image_id", "instance", "score"]:
            raise ValueError(f"unexpected selection CSV header: {header}")
        for name, image_id, instance, score in reader:
            c = dataset.categories.index(name)
            by_cat.setdefault(c, []).append(
                (image_id, int(instance), float(score))
            )
    return [
        PatchSelection(category=c, tau=float("nan"), items=items)
        for c, items in sorted(by_cat.items())
    ]
