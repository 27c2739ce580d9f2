"""Shared numerical core: whitening statistics, closed-form detectors, the
stable sigmoid, and a cost-weighted linear SVM with hard negative mining.

Conventions used throughout the package:

* every linear model is a float64 weight vector of length d + 1 with the
  bias last, applied to a raw d-dimensional feature as ``w[:d].x + w[d]``;
* solver inputs are bias-augmented matrices (constant-1 final column), so
  the bias is regularized along with the direction;
* all heavy products go through numpy/BLAS, and the coordinate sweep runs
  in the compiled kernel from ``_kernels``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._kernels import dcd_sweep
from .errors import NumericError

_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(t):
    """Numerically stable logistic function, clamped to the open interval.

    Returns values in (0, 1) strictly: saturated inputs map to the nearest
    representable float64 neighbor of 0 or 1, never to the endpoints, so
    downstream confidence weights stay valid convex weights.
    """
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    np.clip(out, _SIG_LO, _SIG_HI, out=out)
    return float(out[0]) if scalar else out


@dataclass
class LinearModel:
    """Linear scorer: direction plus trailing bias."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.shape[0] < 2:
            raise ValueError("weights must be a 1-D vector of length >= 2")

    @property
    def direction(self):
        return self.weights[:-1]

    @property
    def bias(self):
        return float(self.weights[-1])

    def response(self, features):
        """Score raw d-dimensional features (single vector or rows)."""
        features = np.asarray(features, dtype=np.float64)
        return features @ self.weights[:-1] + self.weights[-1]


def cosine_similarity(a, b):
    """Cosine of two detector directions, bias coordinate excluded."""
    va = a.direction if isinstance(a, LinearModel) else np.asarray(a, dtype=np.float64)
    vb = b.direction if isinstance(b, LinearModel) else np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(va @ vb / (na * nb))


@dataclass
class WhiteningModel:
    """Background statistics: mean, covariance, and a reusable Cholesky
    factor of the shrunk covariance."""

    mean: np.ndarray
    covariance: np.ndarray
    shrinkage: float
    _factor: tuple = field(repr=False, default=None)

    def solve(self, rhs):
        """Solve (covariance + shrinkage * I) x = rhs; rhs may be a vector
        or a matrix of column right-hand sides."""
        return scipy.linalg.cho_solve(self._factor, rhs)


def fit_whitening(features, shrinkage_lambda=None):
    """Fit background mean/covariance and factor the shrunk covariance once.

    ``shrinkage_lambda=None`` selects the default 0.01 * trace(cov) / d.
    Raises NumericError when the shrunk covariance is not positive definite
    (advice: increase the shrinkage).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, d = features.shape
    if n < 2:
        raise ValueError(f"need at least 2 rows to fit a covariance, got {n}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (n - 1)
    if shrinkage_lambda is None:
        shrinkage_lambda = 0.01 * float(np.trace(cov)) / d
    if shrinkage_lambda < 0:
        raise ValueError("shrinkage_lambda must be nonnegative")
    shrunk = cov + shrinkage_lambda * np.eye(d)
    try:
        factor = scipy.linalg.cho_factor(shrunk, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(
            "covariance factorization failed (matrix not positive definite); "
            "increase shrinkage_lambda"
        ) from exc
    return WhiteningModel(
        mean=mean,
        covariance=cov,
        shrinkage=float(shrinkage_lambda),
        _factor=factor,
    )


def lda_detector(whitening, positive_mean):
    """Closed-form detector for one positive mean: direction solves the
    shrunk covariance system against (positive_mean - background mean); the
    bias coordinate is zero."""
    direction = whitening.solve(
        np.asarray(positive_mean, dtype=np.float64) - whitening.mean
    )
    return LinearModel(np.append(direction, 0.0))


def lda_directions(whitening, positive_means):
    """Batched form of ``lda_detector``: rows of ``positive_means`` map to
    rows of the returned direction matrix (no bias column)."""
    rhs = np.asarray(positive_means, dtype=np.float64) - whitening.mean
    return whitening.solve(rhs.T).T


# ---------------------------------------------------------------------------
# cost-weighted linear SVM

@dataclass
class SvmConfig:
    """Solver and mining knobs.

    ``tol`` is the projected-gradient stopping threshold of the coordinate
    sweep; ``max_rounds`` bounds hard-negative mining rounds; the cache cap
    and prune margin control the active negative set.
    """

    tol: float = 1e-4
    max_sweeps: int = 200000
    max_rounds: int = 10
    cache_cap: int = 20000
    init_cache: int = 1024
    prune_margin: float = 0.01
    chunk_size: int = 8192
    seed: int = 0


@dataclass
class SvmSolution:
    weights: np.ndarray
    alpha: np.ndarray
    sweeps: int
    objective: float


def svm_objective(weights, X, y, cost):
    """Primal objective 0.5||w||^2 + sum_i cost_i * max(0, 1 - y_i w.x_i)."""
    weights = np.asarray(weights, dtype=np.float64)
    margins = 1.0 - np.asarray(y, dtype=np.float64) * (X @ weights)
    hinge = np.maximum(margins, 0.0)
    return 0.5 * float(weights @ weights) + float(np.sum(cost * hinge))


def train_linear_svm(X, y, cost, config=None, warm_alpha=None):
    """Solve the cost-weighted hinge-loss SVM by dual coordinate descent.

    ``X`` already carries any bias augmentation.  Samples are visited in a
    fresh random permutation each sweep (seeded from the config, so the
    trajectory is reproducible), and the solve stops once the largest
    projected-gradient violation in a sweep drops below ``tol``.  The primal
    vector is recomputed from the duals at the end, so the returned weights
    and alphas are exactly consistent.

    Raises NumericError with the duality gap if the sweep budget runs out.
    """
    config = config or SvmConfig()
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cost = np.broadcast_to(np.asarray(cost, dtype=np.float64), y.shape)
    cost = np.ascontiguousarray(cost)
    n = X.shape[0]
    alpha = (
        np.zeros(n)
        if warm_alpha is None
        else np.ascontiguousarray(warm_alpha, dtype=np.float64).copy()
    )
    np.clip(alpha, 0.0, cost, out=alpha)
    w = (alpha * y) @ X
    qdiag = np.einsum("ij,ij->i", X, X)
    rng = np.random.default_rng(config.seed)
    sweeps = 0
    converged = n == 0
    for sweeps in range(1, config.max_sweeps + 1):
        if n == 0:
            break
        order = rng.permutation(n).astype(np.int64)
        viol = dcd_sweep(X, y, cost, qdiag, alpha, w, order)
        if viol < config.tol:
            converged = True
            break
    w = (alpha * y) @ X
    if not converged:
        dual = float(np.sum(alpha)) - 0.5 * float(w @ w)
        primal = svm_objective(w, X, y, cost)
        raise NumericError(
            f"dual coordinate descent did not reach tol={config.tol:g} in "
            f"{config.max_sweeps} sweeps; duality gap {primal - dual:.6e}"
        )
    return SvmSolution(
        weights=w,
        alpha=alpha,
        sweeps=sweeps,
        objective=svm_objective(w, X, y, cost),
    )


@dataclass
class MiningResult:
    """Outcome of a hard-negative-mined SVM solve."""

    model: LinearModel
    alpha_pos: np.ndarray
    alpha_neg: np.ndarray        # aligned with cache_indices
    cache_indices: np.ndarray    # positions into the negative pool
    objective: float             # primal objective over positives + full pool
    rounds: int
    converged: bool              # False when max_rounds ended with violators

    def alpha_neg_full(self, pool_size):
        full = np.zeros(pool_size)
        full[self.cache_indices] = self.alpha_neg
        return full


def _pool_chunks(negatives, chunk_size):
    if isinstance(negatives, np.ndarray):
        for lo in range(0, negatives.shape[0], chunk_size):
            yield lo, negatives[lo : lo + chunk_size]
    else:
        lo = 0
        for block in negatives:
            block = np.asarray(block, dtype=np.float64)
            yield lo, block
            lo += block.shape[0]


def _pool_size(negatives):
    if isinstance(negatives, np.ndarray):
        return negatives.shape[0]
    return sum(np.asarray(b).shape[0] for b in negatives)


def train_svm_hard_negative(positives, pos_cost, negatives, neg_cost=1.0,
                            config=None):
    """Cost-weighted SVM over positives and a large negative pool.

    The cache starts as the first ``init_cache`` pool rows.  The pool (an
    array, or a sequence of row-aligned chunks) is scanned once per round;
    negatives scoring above -1 enter the active cache, cached entries
    scoring below -1 - prune_margin with zero dual weight are dropped, and
    the subproblem is re-solved warm-started until a scan finds no new
    violators or ``max_rounds`` solves have run.  Pool order is the only
    order used anywhere, so the result is deterministic.

    The reported objective is evaluated against the full pool.  When mining
    terminates clean (no violators), every uncached negative has margin
    satisfied strictly and zero dual weight is optimal for it, so the
    cached solve and the full-pool solve share their optimum.
    """
    config = config or SvmConfig()
    positives = np.ascontiguousarray(positives, dtype=np.float64)
    n_pos = positives.shape[0]
    pos_cost = np.broadcast_to(
        np.asarray(pos_cost, dtype=np.float64), (n_pos,)
    ).copy()
    pool_size = _pool_size(negatives)
    neg_cost = np.broadcast_to(
        np.asarray(neg_cost, dtype=np.float64), (pool_size,)
    )

    # seed the cache with a leading slice of the pool so the first solve sees
    # real negatives; an empty start would make every pool entry a violator
    # of the positives-only solution and drag the whole pool into round two
    n_seed = min(config.init_cache, config.cache_cap, pool_size)
    cache = np.arange(n_seed, dtype=np.int64)
    cache_rows = (
        _gather_rows(negatives, cache)
        if n_seed
        else np.empty((0, positives.shape[1]))
    )
    alpha_pos = np.zeros(n_pos)
    alpha_cache = np.zeros(n_seed)
    cached_mask = np.zeros(pool_size, dtype=bool)
    cached_mask[:n_seed] = True
    w = np.zeros(positives.shape[1])
    rounds = 0
    converged = pool_size == 0

    for rounds in range(1, config.max_rounds + 1):
        X = np.concatenate([positives, cache_rows], axis=0)
        y = np.concatenate([np.ones(n_pos), -np.ones(cache.shape[0])])
        cost = np.concatenate([pos_cost, neg_cost[cache]])
        warm = np.concatenate([alpha_pos, alpha_cache])
        sol = train_linear_svm(X, y, cost, config, warm_alpha=warm)
        w = sol.weights
        alpha_pos = sol.alpha[:n_pos]
        alpha_cache = sol.alpha[n_pos:]

        new_idx = []
        pool_scores = np.empty(pool_size)
        for lo, block in _pool_chunks(negatives, config.chunk_size):
            scores = block @ w
            pool_scores[lo : lo + scores.shape[0]] = scores
            hit = np.nonzero(scores > -1.0)[0] + lo
            for g in hit:
                if not cached_mask[g]:
                    new_idx.append(int(g))
        if not new_idx:
            converged = True
            break
        if rounds == config.max_rounds:
            break

        room = config.cache_cap - cache.shape[0]
        admitted = np.asarray(new_idx[: max(room, 0)], dtype=np.int64)
        if admitted.shape[0]:
            cached_mask[admitted] = True
            cache = np.concatenate([cache, admitted])
            cache_rows = np.concatenate(
                [cache_rows, _gather_rows(negatives, admitted)], axis=0
            )
            alpha_cache = np.concatenate(
                [alpha_cache, np.zeros(admitted.shape[0])]
            )
        # prune only inactive entries: removing alpha > 0 rows would change
        # the solution the warm start encodes
        drop = (pool_scores[cache] < -1.0 - config.prune_margin) & (
            alpha_cache == 0.0
        )
        if np.any(drop):
            cached_mask[cache[drop]] = False
            keep = ~drop
            cache = cache[keep]
            cache_rows = cache_rows[keep]
            alpha_cache = alpha_cache[keep]

    full_obj = 0.5 * float(w @ w)
    margins_pos = 1.0 - positives @ w
    full_obj += float(np.sum(pos_cost * np.maximum(margins_pos, 0.0)))
    for lo, block in _pool_chunks(negatives, config.chunk_size):
        margins = 1.0 + block @ w
        full_obj += float(
            np.sum(neg_cost[lo : lo + block.shape[0]] * np.maximum(margins, 0.0))
        )

    return MiningResult(
        model=LinearModel(w),
        alpha_pos=alpha_pos,
        alpha_neg=alpha_cache,
        cache_indices=cache,
        objective=full_obj,
        rounds=rounds,
        converged=converged,
    )


def _gather_rows(negatives, indices):
    if isinstance(negatives, np.ndarray):
        return np.ascontiguousarray(negatives[indices], dtype=np.float64)
    out = []
    lo = 0
    wanted = set(int(i) for i in indices)
    located = {}
    for lo, block in _pool_chunks(negatives, 1 << 62):
        block = np.asarray(block, dtype=np.float64)
        for g in wanted:
            if lo <= g < lo + block.shape[0]:
                located[g] = block[g - lo]
    return np.asarray([located[int(i)] for i in indices])
