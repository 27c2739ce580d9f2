"""Synthetic planted-pattern data and independent reference oracles.

The generator plants per-category part prototypes into a fraction of each
positive bag's instances and records exactly where, so detector quality,
classification accuracy, and localization can be scored against ground
truth that real bag-labeled data never has.

The ``oracle_*`` functions and ``qp_oracle`` are deliberately naive
re-derivations (dense algebra, per-element loops, textbook formulas) used by
the test suite to check the optimized production paths.  They must stay
independent of the modules they certify: none of them may call into the
production implementations.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, ImageRecord, write_atomic
from .errors import NumericError


# ---------------------------------------------------------------------------
# dual QP oracle

@dataclass
class OracleSolution:
    """Certified solution of the cost-weighted SVM dual."""

    alpha: np.ndarray
    weights: np.ndarray
    primal: float
    dual: float
    gap: float


def qp_oracle(X, y, cost, gap_tol=1e-8, max_sweeps=200_000):
    """Solve min 0.5||w||^2 + sum_i cost_i * hinge(y_i, w.x_i) exactly.

    Runs cyclic exact coordinate maximization on the dense dual with box
    constraints 0 <= alpha_i <= cost_i and stops only when the duality gap
    certifies the answer to ``gap_tol`` (relative to the primal value).  The
    certificate is what makes this an oracle; the iteration itself is
    ordinary.  Intended for small dense problems in tests.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cost = np.broadcast_to(np.asarray(cost, dtype=np.float64), y.shape).copy()
    n = X.shape[0]
    if n == 0:
        z = np.zeros(X.shape[1])
        return OracleSolution(np.zeros(0), z, 0.0, 0.0, 0.0)
    signed = X * y[:, None]
    gram = signed @ signed.T
    diag = np.diag(gram).copy()
    alpha = np.zeros(n)

    def primal_dual():
        w = signed.T @ alpha
        margins = 1.0 - y * (X @ w)
        primal = 0.5 * w @ w + float(np.sum(cost * np.maximum(margins, 0.0)))
        dual = float(np.sum(alpha)) - 0.5 * w @ w
        return w, primal, dual

    for sweep in range(max_sweeps):
        for i in range(n):
            g = 1.0 - gram[i] @ alpha
            if diag[i] > 0.0:
                a = alpha[i] + g / diag[i]
            else:
                a = cost[i]
            alpha[i] = min(max(a, 0.0), cost[i])
        if sweep % 4 == 3 or sweep == 0:
            w, primal, dual = primal_dual()
            gap = primal - dual
            if gap <= gap_tol * max(1.0, abs(primal)):
                return OracleSolution(alpha, w, primal, dual, gap)
    w, primal, dual = primal_dual()
    gap = primal - dual
    if gap <= gap_tol * max(1.0, abs(primal)):
        return OracleSolution(alpha, w, primal, dual, gap)
    raise NumericError(
        f"qp_oracle failed to certify: gap {gap:.3e} after {max_sweeps} sweeps"
    )


# ---------------------------------------------------------------------------
# transcription oracles

def _sig(t):
    return 1.0 / (1.0 + np.exp(-np.asarray(t, dtype=np.float64)))


def oracle_mean(features):
    """Per-dimension mean via Kahan compensated summation."""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    total = np.zeros(d)
    carry = np.zeros(d)
    for i in range(n):
        yv = features[i] - carry
        t = total + yv
        carry = (t - total) - yv
        total = t
    return total / n


def oracle_covariance(features):
    """Two-pass sample covariance with the n-1 denominator."""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    mean = oracle_mean(features)
    acc = np.zeros((d, d))
    for i in range(n):
        dev = features[i] - mean
        acc += np.outer(dev, dev)
    return acc / (n - 1)


def oracle_lda_direction(covariance, shrinkage, positive_mean, background_mean):
    """Detector direction by dense solve, no factorization reuse."""
    d = covariance.shape[0]
    return np.linalg.solve(
        covariance + shrinkage * np.eye(d), positive_mean - background_mean
    )


def oracle_bag_latents(instance_features, weights, s_max):
    """Witness set, witness weights, bag feature, and bag confidence.

    Straight transcription: score every instance with the full linear model
    (bias folded as a trailing weight), keep the s_max best with ties broken
    toward the lower index, sigmoid-weight them, and average.
    """
    F = np.asarray(instance_features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    scores = [float(F[m] @ w[:-1] + w[-1]) for m in range(F.shape[0])]
    order = sorted(range(len(scores)), key=lambda m: (-scores[m], m))
    witness = order[: min(s_max, len(order))]
    wm = np.array([_sig(scores[m]) for m in witness])
    phi = np.zeros(F.shape[1])
    for t, m in enumerate(witness):
        phi += wm[t] * F[m]
    phi /= np.sum(wm)
    delta = float(_sig(phi @ w[:-1] + w[-1]))
    return witness, wm, phi, delta


def oracle_encode(instance_features, weight_matrix):
    """Per-detector max response and argmax instance, by double loop."""
    F = np.asarray(instance_features, dtype=np.float64)
    W = np.asarray(weight_matrix, dtype=np.float64)
    values = np.empty(W.shape[0])
    argmax = np.empty(W.shape[0], dtype=np.int64)
    for k in range(W.shape[0]):
        best = -np.inf
        best_m = 0
        for m in range(F.shape[0]):
            r = float(F[m] @ W[k, :-1] + W[k, -1])
            if r > best:
                best = r
                best_m = m
        values[k] = best
        argmax[k] = best_m
    return values, argmax


def oracle_part_map(boxes, responses, width, height, stride):
    """Normalized part heat map by per-cell containment loop.

    Cell (i, j) has center ((j + 0.5) * stride, (i + 0.5) * stride); an
    instance covers it when the center lies in the half-open box.  Cell value
    is the sum of sigmoid responses of covering instances, normalized by the
    maximum cell (an all-zero map stays zero).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    n_rows = int(math.ceil(height / stride))
    n_cols = int(math.ceil(width / stride))
    grid = np.zeros((n_rows, n_cols))
    for i in range(n_rows):
        cy = (i + 0.5) * stride
        for j in range(n_cols):
            cx = (j + 0.5) * stride
            for m in range(boxes.shape[0]):
                x0, y0, x1, y1 = boxes[m]
                if x0 <= cx < x1 and y0 <= cy < y1:
                    grid[i, j] += _sig(responses[m])
    peak = grid.max() if grid.size else 0.0
    if peak > 0.0:
        grid = grid / peak
    return grid


def oracle_object_map(part_maps, reliabilities):
    """Reliability-weighted convex combination of part maps."""
    total = np.zeros_like(part_maps[0])
    z = 0.0
    for grid, rel in zip(part_maps, reliabilities):
        total = total + rel * grid
        z += rel
    return total / z


def oracle_average_precision(scores, labels):
    """All-points average precision by quadratic rank walk."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranked = labels[order]
    npos = int(ranked.sum())
    if npos == 0:
        raise ValueError("no positive labels")
    prec = []
    hits = 0
    for r, flag in enumerate(ranked, start=1):
        if flag:
            hits += 1
        prec.append(hits / r)
    ap = 0.0
    for r, flag in enumerate(ranked):
        if flag:
            ap += max(prec[r:]) / npos
    return ap


def oracle_entropy(counts):
    """Shannon entropy in bits of a count vector, zero terms dropped."""
    counts = [c for c in counts if c > 0]
    n = sum(counts)
    h = 0.0
    for c in counts:
        p = c / n
        h -= p * math.log2(p)
    return h


def oracle_iou(box_a, box_b):
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def adjusted_rand_index(labels_a, labels_b):
    """Pair-counting ARI between two flat label assignments."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("label arrays differ in length")
    n = a.shape[0]
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    for i in range(n):
        table[ia[i], ib[i]] += 1

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table.astype(np.float64)).sum()
    sum_a = comb2(table.sum(axis=1).astype(np.float64)).sum()
    sum_b = comb2(table.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    expected = sum_a * sum_b / total if total > 0 else 0.0
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return (sum_ij - expected) / (maximum - expected)


def planted_detectors(n_clusters, per_cluster, dim, jitter=0.05, seed=0):
    """Unit detector directions in tight angular clusters, plus true labels.

    Returns a (n_clusters * per_cluster, dim + 1) weight matrix (bias last,
    zero) and the integer cluster labels. Random cluster centers in high
    dimension are nearly orthogonal, so the block structure is unambiguous
    for small jitter.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    rows = []
    labels = []
    for k in range(n_clusters):
        for _ in range(per_cluster):
            v = centers[k] + jitter * rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            rows.append(v)
            labels.append(k)
    W = np.zeros((len(rows), dim + 1))
    W[:, :-1] = np.asarray(rows)
    return W, np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# planted-pattern dataset generator

@dataclass
class SynthSpec:
    """Knobs for the planted-pattern generator."""

    n_categories: int = 5
    n_parts: int = 3
    plants_per_part: int = 2
    bags_per_category: int = 100
    instances_per_bag: int = 50
    feature_dim: int = 64
    noise_sigma: float = 0.05
    corrupt_fraction: float = 0.0
    background_scale: float = 1.0
    prototype_scale: float = 3.0
    image_size: int = 128
    seed: int = 0

    def validate(self):
        if self.n_categories < 2:
            raise ValueError("need at least 2 categories")
        if self.n_parts < 1:
            raise ValueError("need at least 1 part per category")
        if self.plants_per_part < 1:
            raise ValueError("need at least 1 instance per part")
        if self.n_parts * self.plants_per_part > self.instances_per_bag:
            raise ValueError(
                f"n_parts={self.n_parts} x plants_per_part="
                f"{self.plants_per_part} exceeds instances_per_bag="
                f"{self.instances_per_bag}"
            )
        if self.bags_per_category < 1:
            raise ValueError("need at least 1 bag per category")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 0.0 <= self.corrupt_fraction < 1.0:
            raise ValueError("corrupt_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16 pixels")


@dataclass
class SynthTruth:
    """Ground truth sidecar: prototypes and per-image planting records."""

    prototypes: np.ndarray  # (n_categories, n_parts, d)
    images: dict = field(default_factory=dict)
    # images[image_id] = {"category": int, "corrupted": bool,
    #                     "box": [x0, y0, x1, y1] or None,
    #                     "planted": [[instance_idx, part_idx], ...]}

    def save(self, path):
        payload = {
            "format_version": 1,
            "prototypes": self.prototypes.tolist(),
            "images": self.images,
        }
        write_atomic(path, json.dumps(payload, indent=1))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            payload = json.load(fh)
        images = {}
        for image_id, rec in payload["images"].items():
            images[image_id] = {
                "category": int(rec["category"]),
                "corrupted": bool(rec["corrupted"]),
                "box": None if rec["box"] is None else [float(v) for v in rec["box"]],
                "planted": [[int(m), int(p)] for m, p in rec["planted"]],
            }
        return cls(
            prototypes=np.asarray(payload["prototypes"], dtype=np.float64),
            images=images,
        )


def _rectified(rng, shape):
    return np.maximum(rng.standard_normal(shape), 0.0)


def _planted_box(rng, size):
    # 20 to 40 percent of the image area, mild aspect jitter, integer pixels
    area = rng.uniform(0.2, 0.4) * size * size
    aspect = rng.uniform(0.75, 4.0 / 3.0)
    bw = int(round(math.sqrt(area * aspect)))
    bh = int(round(math.sqrt(area / aspect)))
    bw = min(max(bw, 4), size)
    bh = min(max(bh, 4), size)
    x0 = int(rng.integers(0, size - bw + 1))
    y0 = int(rng.integers(0, size - bh + 1))
    return [float(x0), float(y0), float(x0 + bw), float(y0 + bh)]


def _background_box(rng, size):
    # small relative to the planted box so clutter responses, which sit
    # near the decision margin, cannot pile up past the object plateau
    lo = max(4, size // 16)
    hi = max(lo + 1, size // 4)
    bw = int(rng.integers(lo, hi + 1))
    bh = int(rng.integers(lo, hi + 1))
    x0 = int(rng.integers(0, size - bw + 1))
    y0 = int(rng.integers(0, size - bh + 1))
    return [float(x0), float(y0), float(x0 + bw), float(y0 + bh)]


def generate(spec):
    """Build a planted-pattern dataset and its ground-truth sidecar.

    Every bag carries exactly one category label.  A clean positive bag gets
    ``plants_per_part`` planted instances per part prototype, all sharing one
    object box covering 20-40 percent of the image (mirroring how proposal
    sets put several overlapping windows on a real object); a corrupted bag
    is background only.  Features are rectified Gaussian background plus, for
    planted instances, prototype + sigma * rectified noise, so nonnegativity
    holds everywhere.  Deterministic for a given spec (bit-identical on
    repeat calls).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.feature_dim
    size = spec.image_size

    prototypes = np.empty((spec.n_categories, spec.n_parts, d))
    for c in range(spec.n_categories):
        for p in range(spec.n_parts):
            while True:
                v = _rectified(rng, d)
                norm = np.linalg.norm(v)
                if norm > 0:
                    break
            prototypes[c, p] = spec.prototype_scale * v / norm

    categories = [f"cat{c:02d}" for c in range(spec.n_categories)]
    records = []
    blocks = []
    truth_images = {}
    offset = 0
    counter = 0
    for c in range(spec.n_categories):
        n_bags = spec.bags_per_category
        n_corrupt = int(round(spec.corrupt_fraction * n_bags))
        corrupt_idx = set(
            int(v) for v in rng.choice(n_bags, size=n_corrupt, replace=False)
        )
        for b in range(n_bags):
            image_id = f"img_{counter:05d}"
            counter += 1
            n_inst = spec.instances_per_bag
            feats = _rectified(rng, (n_inst, d)) * spec.background_scale
            boxes = np.array(
                [_background_box(rng, size) for _ in range(n_inst)]
            )
            corrupted = b in corrupt_idx
            planted = []
            box = None
            if not corrupted:
                box = _planted_box(rng, size)
                n_plant = spec.n_parts * spec.plants_per_part
                slots = rng.choice(n_inst, size=n_plant, replace=False)
                for j, m in enumerate(int(v) for v in slots):
                    p = j % spec.n_parts
                    feats[m] = prototypes[c, p] + spec.noise_sigma * _rectified(
                        rng, d
                    )
                    boxes[m] = box
                    planted.append([m, p])
            records.append(
                ImageRecord(
                    image_id=image_id,
                    labels=(c,),
                    n_instances=n_inst,
                    width=size,
                    height=size,
                    start=offset,
                    stop=offset + n_inst,
                    boxes=boxes,
                )
            )
            blocks.append(feats)
            truth_images[image_id] = {
                "category": c,
                "corrupted": corrupted,
                "box": box,
                "planted": planted,
            }
            offset += n_inst

    dataset = Dataset(d, categories, records, np.concatenate(blocks, axis=0))
    truth = SynthTruth(prototypes=prototypes, images=truth_images)
    return dataset, truth
