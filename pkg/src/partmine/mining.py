"""Pattern mining: cluster exemplar detectors, score cluster coverage by
source-image entropy, keep the broadest clusters, and mine their seed
patterns.

Clustering is spectral: cosine similarities between detector directions are
rectified into an affinity, the symmetric normalized Laplacian's bottom
eigenvectors embed the detectors, and k-means (own implementation, k-means++
seeding, fixed restart count, first-seen tie policy) partitions the rows.
Detectors with no positive affinity to anyone are held out of k-means and
attached to the nearest centroid afterwards.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dataset import write_atomic
from .errors import FormatError
from .numerics import LinearModel

BANK_MAGIC = b"PMDB"
BANK_VERSION = 1


# ---------------------------------------------------------------------------
# k-means

def _kmeans_pp_init(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for t in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centers[t] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[t]) ** 2, axis=1))
    return centers


def kmeans(X, k, seed, n_restarts=20, max_iter=100):
    """Lloyd's algorithm with k-means++ seeding.

    Runs ``n_restarts`` independent initializations from one seeded
    generator and keeps the strictly best inertia (first seen wins ties).
    Point-to-center ties resolve to the lower center index; an emptied
    cluster is reseeded with the point farthest from its current center.
    Returns (labels, centers, inertia).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        centers = _kmeans_pp_init(X, k, rng)
        labels = np.full(n, -1, dtype=np.int64)
        for _ in range(max_iter):
            d2 = (
                np.sum(X**2, axis=1)[:, None]
                - 2.0 * X @ centers.T
                + np.sum(centers**2, axis=1)[None, :]
            )
            new_labels = np.argmin(d2, axis=1)
            reseeded = np.zeros(n, dtype=bool)
            for j in range(k):
                member = new_labels == j
                if not np.any(member):
                    cand = d2[np.arange(n), new_labels].copy()
                    cand[reseeded] = -np.inf
                    worst = int(np.argmax(cand))
                    new_labels[worst] = j
                    reseeded[worst] = True
                    member = new_labels == j
                centers[j] = X[member].mean(axis=0)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        d2 = np.sum((X - centers[labels]) ** 2, axis=1)
        inertia = float(d2.sum())
        if best is None or inertia < best[2]:
            best = (labels.copy(), centers.copy(), inertia)
    return best


# ---------------------------------------------------------------------------
# spectral partition

def similarity_matrix(detectors):
    """Pairwise cosine similarity of detector directions (bias excluded).

    Accepts a list of objects carrying ``model.weights`` / plain
    LinearModels, or a (n, d + 1) weight matrix.
    """
    W = weight_matrix(detectors)[:, :-1]
    norms = np.linalg.norm(W, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("cosine similarity of a zero vector is undefined")
    U = W / norms[:, None]
    S = U @ U.T
    np.clip(S, -1.0, 1.0, out=S)
    np.fill_diagonal(S, 1.0)
    return S


def weight_matrix(detectors):
    """(n, d + 1) float64 weight matrix from any detector collection."""
    if isinstance(detectors, np.ndarray):
        return np.asarray(detectors, dtype=np.float64)
    rows = []
    for det in detectors:
        model = det if isinstance(det, LinearModel) else det.model
        rows.append(model.weights)
    return np.asarray(rows, dtype=np.float64)


def spectral_partition(S, k, seed, n_restarts=20):
    """Cluster labels from the similarity matrix.

    Affinity is the rectified similarity with a zero diagonal; the embedding
    is the k bottom eigenvectors of the symmetric normalized Laplacian with
    unit-normalized rows.  Rows of isolated detectors (zero affinity to
    everything) stay at the origin, are excluded from k-means, and are then
    assigned to the nearest centroid.
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if S.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    A = np.maximum(S, 0.0)
    np.fill_diagonal(A, 0.0)
    deg = A.sum(axis=1)
    isolated = deg <= 0.0
    inv_sqrt = np.zeros(n)
    inv_sqrt[~isolated] = 1.0 / np.sqrt(deg[~isolated])
    L = np.eye(n) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    L = 0.5 * (L + L.T)
    _, vec = scipy.linalg.eigh(L, subset_by_index=[0, k - 1])
    norms = np.linalg.norm(vec, axis=1)
    embed = np.zeros_like(vec)
    ok = norms > 0.0
    embed[ok] = vec[ok] / norms[ok, None]
    embed[isolated] = 0.0

    active = np.nonzero(~isolated)[0]
    labels = np.empty(n, dtype=np.int64)
    if active.shape[0] == 0:
        raise ValueError("every detector is isolated; nothing to cluster")
    if k > active.shape[0]:
        raise ValueError(
            f"k={k} exceeds the {active.shape[0]} non-isolated detectors"
        )
    sub_labels, centers, _ = kmeans(embed[active], k, seed, n_restarts)
    labels[active] = sub_labels
    for i in np.nonzero(isolated)[0]:
        d2 = np.sum((centers - embed[i]) ** 2, axis=1)
        labels[i] = int(np.argmin(d2))
    return labels


# ---------------------------------------------------------------------------
# clusters, entropy, seed patterns

@dataclass
class DetectorCluster:
    """A group of member detectors (indices into the category's detector
    list) with its coverage entropy and, once selected, its keep rank."""

    category: int
    members: list
    entropy: float = 0.0
    rank: int = -1
    seed_patterns: list = field(default_factory=list)


def entropy_coverage(members, detectors):
    """Shannon entropy (bits) of the member detectors' source images.

    p(I | C) is the fraction of member detectors whose seed patch came from
    image I; broad clusters drawing from many images score high.
    """
    counts = {}
    for t in members:
        src = detectors[t].source[0]
        counts[src] = counts.get(src, 0) + 1
    total = sum(counts.values())
    h = 0.0
    for c in counts.values():
        p = c / total
        h -= p * np.log2(p)
    return float(h)


def build_clusters(detectors, labels, category):
    """Wrap spectral labels into DetectorCluster records (cluster index =
    label), each with its entropy."""
    k = int(labels.max()) + 1
    clusters = []
    for j in range(k):
        members = [int(t) for t in np.nonzero(labels == j)[0]]
        h = entropy_coverage(members, detectors) if members else 0.0
        clusters.append(
            DetectorCluster(category=category, members=members, entropy=h)
        )
    return clusters


def greedy_select(clusters, n_keep):
    """Keep the n_keep highest-entropy clusters (ties to the smaller cluster
    index) and stamp their ranks 0..n_keep-1."""
    order = sorted(
        range(len(clusters)), key=lambda j: (-clusters[j].entropy, j)
    )
    kept = []
    for rank, j in enumerate(order[:n_keep]):
        clusters[j].rank = rank
        kept.append(clusters[j])
    return kept


def cluster_direction(detectors, members):
    """Summed weight vector of the member detectors; because responses are
    linear, scoring with the sum equals summing member responses."""
    W = weight_matrix([detectors[t] for t in members])
    return W.sum(axis=0)


def mine_patterns(cluster, detectors, dataset, top_patterns=100):
    """Fill the cluster's seed patterns: the best instance per positive
    image under the summed member response, top images first, at most one
    pattern per image."""
    combined = LinearModel(cluster_direction(detectors, cluster.members))
    found = []
    for i in dataset.positives_of(cluster.category):
        scores = combined.response(dataset.features_of(i))
        m = int(np.argmax(scores))
        found.append((dataset.images[i].image_id, m, float(scores[m])))
    found.sort(key=lambda t: (-t[2], t[0], t[1]))
    cluster.seed_patterns = found[:top_patterns]
    return cluster.seed_patterns


# ---------------------------------------------------------------------------
# detector bank serialization

@dataclass
class BankEntry:
    category: int
    source_image_id: str
    source_instance: int
    weights: np.ndarray


@dataclass
class ClusterRecord:
    category: int
    entropy: float
    rank: int
    members: np.ndarray


@dataclass
class DetectorBank:
    """Ordered detector collection plus its cluster table.

    Detectors are grouped by category and, for trained banks, ordered by
    keep rank within the category.
    """

    feature_dim: int
    entries: list
    clusters: list = field(default_factory=list)

    def weight_matrix(self):
        return np.asarray([e.weights for e in self.entries])

    def models(self):
        return [LinearModel(e.weights) for e in self.entries]

    def category_entries(self, category):
        return [
            t for t, e in enumerate(self.entries) if e.category == category
        ]

    def categories(self):
        return sorted(set(e.category for e in self.entries))


def save_bank(bank, path):
    """Binary, little-endian, bit-exact round trip of every weight."""
    out = bytearray()
    out += BANK_MAGIC
    out += struct.pack(
        "<IIII",
        BANK_VERSION,
        bank.feature_dim,
        len(bank.entries),
        len(bank.clusters),
    )
    for e in bank.entries:
        w = np.ascontiguousarray(e.weights, dtype="<f8")
        if w.shape != (bank.feature_dim + 1,):
            raise ValueError(
                f"entry weight length {w.shape} does not match feature_dim "
                f"{bank.feature_dim}"
            )
        ident = e.source_image_id.encode("utf-8")
        out += struct.pack("<iH", e.category, len(ident))
        out += ident
        out += struct.pack("<i", e.source_instance)
        out += w.tobytes()
    for c in bank.clusters:
        members = np.ascontiguousarray(c.members, dtype="<u4")
        out += struct.pack("<idiI", c.category, c.entropy, c.rank,
                           members.shape[0])
        out += members.tobytes()
    write_atomic(path, bytes(out))


def load_bank(path):
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("detector bank truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != BANK_MAGIC:
        raise FormatError("not a detector bank (bad magic)")
    version, dim, n_entries, n_clusters = struct.unpack("<IIII", take(16))
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}")
    entries = []
    for _ in range(n_entries):
        category, idlen = struct.unpack("<iH", take(6))
        ident = bytes(take(idlen)).decode("utf-8")
        (instance,) = struct.unpack("<i", take(4))
        w = np.frombuffer(take(8 * (dim + 1)), dtype="<f8").astype(np.float64)
        entries.append(
            BankEntry(
                category=category,
                source_image_id=ident,
                source_instance=instance,
                weights=w,
            )
        )
    clusters = []
    for _ in range(n_clusters):
        category, entropy, rank, n_mem = struct.unpack("<idiI", take(20))
        members = np.frombuffer(take(4 * n_mem), dtype="<u4").astype(np.int64)
        clusters.append(
            ClusterRecord(
                category=category, entropy=entropy, rank=rank, members=members
            )
        )
    if pos != len(data):
        raise FormatError(
            f"{len(data) - pos} trailing bytes after detector bank payload"
        )
    return DetectorBank(feature_dim=dim, entries=entries, clusters=clusters)
