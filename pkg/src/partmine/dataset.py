"""Bag-labeled feature datasets.

A dataset is a JSON manifest plus a raw float32 feature blob.  The manifest
lists categories and images; each image is a bag of feature instances stored
contiguously in the blob, in manifest order, row-major, little-endian.
Features are converted to float64 on load and all computation happens in
float64; float32 is a storage format only.

Manifest schema (format_version 1)::

    {
      "format_version": 1,
      "feature_dim": 64,
      "feature_blob": "features.bin",
      "categories": ["aeroplane", ...],
      "images": [
        {"image_id": "img_0000", "labels": [0], "n_instances": 50,
         "width": 128, "height": 128,
         "boxes": [[x0, y0, x1, y1], ...],      # optional, pixel units
         "objectness": [0.7, ...]},             # optional
        ...
      ]
    }

Boxes use half-open pixel coordinates with x1 > x0 and y1 > y0, clipped to
the image. Instance features must be finite and nonnegative (post-ReLU
convention).
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

FORMAT_VERSION = 1


def write_atomic(path, data):
    """Write bytes (or str, encoded utf-8) to path via rename, so a reader
    never observes a half-written artifact."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ImageRecord:
    """One bag: its identity, labels, geometry, and the feature-row span."""

    image_id: str
    labels: tuple
    n_instances: int
    width: int
    height: int
    start: int
    stop: int
    boxes: np.ndarray | None = None
    objectness: np.ndarray | None = None

    def has_label(self, category):
        return category in self.labels


class Dataset:
    """In-memory dataset: image records plus one (n_total, d) feature matrix.

    ``features`` is float64, C-order; image ``i`` owns rows
    ``images[i].start:images[i].stop``.
    """

    def __init__(self, feature_dim, categories, images, features):
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != feature_dim:
            raise ValidationError(
                f"feature matrix shape {features.shape} does not match "
                f"feature_dim {feature_dim}"
            )
        total = sum(im.n_instances for im in images)
        if features.shape[0] != total:
            raise ValidationError(
                f"feature matrix has {features.shape[0]} rows, images "
                f"declare {total} instances"
            )
        seen = set()
        for im in images:
            if im.image_id in seen:
                raise ValidationError(f"duplicate image_id '{im.image_id}'")
            seen.add(im.image_id)
        self.feature_dim = feature_dim
        self.categories = list(categories)
        self.images = list(images)
        self.features = features
        self._index = {im.image_id: i for i, im in enumerate(self.images)}
        self._augmented = None

    @property
    def n_images(self):
        return len(self.images)

    @property
    def n_categories(self):
        return len(self.categories)

    def index_of(self, image_id):
        try:
            return self._index[image_id]
        except KeyError:
            raise KeyError(f"unknown image_id '{image_id}'") from None

    def features_of(self, image):
        """Feature rows of one bag (a view), by index."""
        im = self.images[image]
        return self.features[im.start:im.stop]

    def instance_feature(self, image, instance):
        im = self.images[image]
        if not 0 <= instance < im.n_instances:
            raise ValueError(
                f"instance {instance} out of range for image "
                f"'{im.image_id}' with {im.n_instances} instances"
            )
        return self.features[im.start + instance]

    def sum_pool(self, image):
        """Bag-level feature: the arithmetic mean of the bag's instances."""
        return self.features_of(image).mean(axis=0)

    def pooled_matrix(self):
        """(n_images, d) matrix whose rows are ``sum_pool`` of each image."""
        out = np.empty((self.n_images, self.feature_dim))
        for i in range(self.n_images):
            out[i] = self.sum_pool(i)
        return out

    def augmented(self):
        """(n_total, d + 1) feature matrix with a constant-1 bias column,
        cached after the first call."""
        if self._augmented is None:
            aug = np.ones((self.features.shape[0], self.feature_dim + 1))
            aug[:, :-1] = self.features
            self._augmented = aug
        return self._augmented

    def augmented_of(self, image):
        im = self.images[image]
        return self.augmented()[im.start:im.stop]

    def positives_of(self, category):
        """Indices of images labeled with the category, manifest order."""
        return [i for i, im in enumerate(self.images) if im.has_label(category)]

    def negatives_of(self, category):
        return [i for i, im in enumerate(self.images) if not im.has_label(category)]

    def subset(self, indices):
        """New dataset restricted to the given image indices (kept in the
        given order); features are copied."""
        indices = list(indices)
        blocks = []
        records = []
        offset = 0
        for i in indices:
            im = self.images[i]
            blocks.append(self.features[im.start:im.stop])
            records.append(
                ImageRecord(
                    image_id=im.image_id,
                    labels=im.labels,
                    n_instances=im.n_instances,
                    width=im.width,
                    height=im.height,
                    start=offset,
                    stop=offset + im.n_instances,
                    boxes=None if im.boxes is None else im.boxes.copy(),
                    objectness=None
                    if im.objectness is None
                    else im.objectness.copy(),
                )
            )
            offset += im.n_instances
        features = (
            np.concatenate(blocks, axis=0)
            if blocks
            else np.empty((0, self.feature_dim))
        )
        return Dataset(self.feature_dim, self.categories, records, features)


def sum_pool(dataset, image):
    """Module-level alias for ``Dataset.sum_pool``."""
    return dataset.sum_pool(image)


def _require(mapping, key, context):
    if key not in mapping:
        raise FormatError(f"{context}: missing required key '{key}'")
    return mapping[key]


def load_dataset(manifest_path):
    """Load a dataset from its JSON manifest, validating format and data.

    Raises FormatError for structural problems (bad version, blob size
    mismatch), ValidationError for invariant violations (negative features,
    malformed boxes, bad labels), and OSError if a file is missing.
    """
    with open(manifest_path, "rb") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError("manifest root must be a JSON object")
    version = _require(manifest, "format_version", "manifest")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported format_version {version!r}, expected {FORMAT_VERSION}"
        )
    feature_dim = _require(manifest, "feature_dim", "manifest")
    if not isinstance(feature_dim, int) or feature_dim < 1:
        raise FormatError(f"feature_dim must be a positive integer, got {feature_dim!r}")
    categories = _require(manifest, "categories", "manifest")
    if not isinstance(categories, list) or not all(isinstance(c, str) for c in categories):
        raise FormatError("categories must be a list of strings")
    if len(set(categories)) != len(categories):
        raise ValidationError("duplicate category names in manifest")
    raw_images = _require(manifest, "images", "manifest")
    if not isinstance(raw_images, list) or not raw_images:
        raise FormatError("images must be a non-empty list")

    records = []
    offset = 0
    for entry in raw_images:
        if not isinstance(entry, dict):
            raise FormatError("each image entry must be a JSON object")
        image_id = _require(entry, "image_id", "image entry")
        labels = _require(entry, "labels", f"image '{image_id}'")
        n_instances = _require(entry, "n_instances", f"image '{image_id}'")
        width = _require(entry, "width", f"image '{image_id}'")
        height = _require(entry, "height", f"image '{image_id}'")
        if not isinstance(n_instances, int) or n_instances < 1:
            raise ValidationError(
                f"image '{image_id}': n_instances must be a positive integer"
            )
        if not isinstance(width, int) or not isinstance(height, int) or width < 1 or height < 1:
            raise ValidationError(f"image '{image_id}': width and height must be positive integers")
        if not isinstance(labels, list) or not all(isinstance(c, int) for c in labels):
            raise ValidationError(f"image '{image_id}': labels must be a list of integers")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"image '{image_id}': duplicate labels")
        for c in labels:
            if not 0 <= c < len(categories):
                raise ValidationError(
                    f"image '{image_id}': label {c} outside the "
                    f"{len(categories)} declared categories"
                )
        boxes = entry.get("boxes")
        if boxes is not None:
            boxes = np.asarray(boxes, dtype=np.float64)
            if boxes.shape != (n_instances, 4):
                raise ValidationError(
                    f"image '{image_id}': boxes shape {boxes.shape} does not "
                    f"match ({n_instances}, 4)"
                )
            if not np.all(np.isfinite(boxes)):
                raise ValidationError(f"image '{image_id}': non-finite box coordinate")
            bad = (
                (boxes[:, 0] >= boxes[:, 2])
                | (boxes[:, 1] >= boxes[:, 3])
                | (boxes[:, 0] < 0)
                | (boxes[:, 1] < 0)
                | (boxes[:, 2] > width)
                | (boxes[:, 3] > height)
            )
            if np.any(bad):
                m = int(np.argmax(bad))
                raise ValidationError(
                    f"image '{image_id}': malformed box {boxes[m].tolist()} "
                    f"at instance {m}"
                )
        objectness = entry.get("objectness")
        if objectness is not None:
            objectness = np.asarray(objectness, dtype=np.float64)
            if objectness.shape != (n_instances,):
                raise ValidationError(
                    f"image '{image_id}': objectness length does not match n_instances"
                )
            if not np.all(np.isfinite(objectness)):
                raise ValidationError(f"image '{image_id}': non-finite objectness")
        records.append(
            ImageRecord(
                image_id=image_id,
                labels=tuple(labels),
                n_instances=n_instances,
                width=width,
                height=height,
                start=offset,
                stop=offset + n_instances,
                boxes=boxes,
                objectness=objectness,
            )
        )
        offset += n_instances

    blob_name = _require(manifest, "feature_blob", "manifest")
    blob_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), blob_name)
    expected = offset * feature_dim * 4
    actual = os.path.getsize(blob_path)
    if actual != expected:
        raise FormatError(
            f"feature blob size mismatch: expected {expected} bytes "
            f"({offset} instances x {feature_dim} dims x 4), got {actual}"
        )
    raw = np.fromfile(blob_path, dtype="<f4").reshape(offset, feature_dim)
    features = raw.astype(np.float64)

    if not np.all(np.isfinite(features)):
        row = int(np.argwhere(~np.isfinite(features).all(axis=1))[0, 0])
        raise ValidationError(
            f"non-finite feature value in image '{_owner(records, row)}'"
        )
    if np.any(features < 0):
        row = int(np.argwhere((features < 0).any(axis=1))[0, 0])
        raise ValidationError(
            f"negative feature value in image '{_owner(records, row)}'"
        )
    return Dataset(feature_dim, categories, records, features)


def _owner(records, row):
    for im in records:
        if im.start <= row < im.stop:
            return im.image_id
    return "<unknown>"


def save_dataset(dataset, manifest_path, blob_name=None):
    """Write the manifest and float32 feature blob next to each other.

    Both files are written atomically. Returns the blob path.
    """
    if blob_name is None:
        base = os.path.basename(manifest_path)
        stem = base[: -len(".json")] if base.endswith(".json") else base
        blob_name = stem + ".features.bin"
    images = []
    for im in dataset.images:
        entry = {
            "image_id": im.image_id,
            "labels": list(im.labels),
            "n_instances": im.n_instances,
            "width": im.width,
            "height": im.height,
        }
        if im.boxes is not None:
            entry["boxes"] = [[float(v) for v in row] for row in im.boxes]
        if im.objectness is not None:
            entry["objectness"] = [float(v) for v in im.objectness]
        images.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "feature_dim": dataset.feature_dim,
        "feature_blob": blob_name,
        "categories": list(dataset.categories),
        "images": images,
    }
    blob_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), blob_name)
    write_atomic(blob_path, dataset.features.astype("<f4").tobytes(order="C"))
    write_atomic(manifest_path, json.dumps(manifest, indent=1))
    return blob_path


def dataset_digest(manifest_path):
    """sha256 hex digest over the manifest bytes and the feature blob bytes."""
    h = hashlib.sha256()
    with open(manifest_path, "rb") as fh:
        data = fh.read()
    h.update(data)
    manifest = json.loads(data)
    blob_path = os.path.join(
        os.path.dirname(os.path.abspath(manifest_path)), manifest["feature_blob"]
    )
    with open(blob_path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


@dataclass
class FoldAssignment:
    """A k-way split of a dataset's images; every image sits in exactly one
    fold."""

    k: int
    assignment: dict = field(default_factory=dict)

    def fold_of(self, image_id):
        return self.assignment[image_id]

    def images_in_fold(self, j):
        return [im for im, f in self.assignment.items() if f == j]

    def fold_sizes(self):
        sizes = [0] * self.k
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes


def make_folds(dataset, k, seed):
    """Assign every image to one of k folds, stratified by category.

    Rare categories are balanced first, so per-category positive counts
    differ by at most one across folds whenever the labeling permits it, and
    total fold sizes stay within one of each other in the single-label case.
    Deterministic for a given (dataset order, k, seed).
    """
    if not isinstance(k, int) or k < 2:
        raise ValueError(f"k must be an integer >= 2, got {k!r}")
    if k > dataset.n_images:
        raise ValueError(
            f"k={k} exceeds the image count {dataset.n_images}"
        )
    rng = np.random.default_rng(seed)
    n_cat = dataset.n_categories
    pos_lists = [dataset.positives_of(c) for c in range(n_cat)]
    order = sorted(range(n_cat), key=lambda c: (len(pos_lists[c]), c))

    fold_of = {}
    totals = np.zeros(k, dtype=np.int64)
    cat_counts = np.zeros((n_cat, k), dtype=np.int64)

    def place(image_idx, keys):
        # keys: per-fold sort keys, ties broken by fold index
        j = min(range(k), key=lambda f: keys(f) + (f,))
        im = dataset.images[image_idx]
        fold_of[image_idx] = j
        totals[j] += 1
        for c in im.labels:
            cat_counts[c, j] += 1

    for c in order:
        pending = [i for i in pos_lists[c] if i not in fold_of]
        pending = [pending[t] for t in rng.permutation(len(pending))]
        for i in pending:
            place(i, lambda f: (int(cat_counts[c, f]), int(totals[f])))
    pending = [i for i in range(dataset.n_images) if i not in fold_of]
    pending = [pending[t] for t in rng.permutation(len(pending))]
    for i in pending:
        place(i, lambda f: (int(totals[f]),))

    assignment = {
        im.image_id: fold_of[i] for i, im in enumerate(dataset.images)
    }
    return FoldAssignment(k=k, assignment=assignment)
