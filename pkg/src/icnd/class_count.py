"""Estimating the number of unseen classes with anchored semi-supervised k-means.

Labels are integer arrays aligned with the rows of ``Z``; ``-1`` marks an
unlabeled row. Base classes are the distinct non-negative labels, and the
anchored centroids follow their sorted order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import DegenerateInputError, InvalidInputError

UNLABELED = -1
MAX_ITER = 100


@dataclass
class ClusterModel:
    centroids: np.ndarray     # (k, d)
    anchored_count: int
    assignments: np.ndarray   # (n,) centroid index per row
    inertia: float
    classes: np.ndarray       # label of anchored centroid j is classes[j]
    n_iter: int = 0


def _check_unit_rows(Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or len(Z) == 0:
        raise InvalidInputError("embeddings must be a nonempty 2-D array")
    norms = np.linalg.norm(Z, axis=1)
    if np.any(np.abs(norms - 1) > 1e-6):
        raise InvalidInputError("embedding rows must be unit-norm within 1e-6")
    return Z


def _split_labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size != n:
        raise InvalidInputError(f"{labels.size} labels for {n} embeddings")
    classes = np.unique(labels[labels != UNLABELED])
    if np.any((labels < 0) & (labels != UNLABELED)):
        raise InvalidInputError("class labels must be non-negative (-1 marks unlabeled)")
    return labels, classes


def class_means(Z_L, labels):
    """Unit-normalised mean of each class, in sorted class order; returns (classes, centroids)."""
    Z_L = np.asarray(Z_L, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    classes = np.unique(labels)
    if len(classes) == 0:
        raise InvalidInputError("no labeled samples")
    means = np.stack([Z_L[labels == c].mean(axis=0) for c in classes])
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateInputError("a class mean is the zero vector")
    return classes, means / norms


def kmeanspp_init(Z, count, rng, existing=None):
    """D² seeding of ``count`` new centroids, measuring distance to existing ∪ chosen.

    Rows already chosen get zero probability, so picks are distinct rows. When
    every remaining distance is zero the pick is uniform over unchosen rows.
    """
    Z = np.asarray(Z, dtype=np.float64)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    if count > len(Z):
        raise InvalidInputError(f"cannot choose {count} centroids from {len(Z)} rows")
    if count == 0:
        return np.zeros((0, Z.shape[1]))
    if existing is not None and len(existing):
        d2 = cdist(Z, np.asarray(existing, dtype=np.float64), "sqeuclidean").min(axis=1)
    else:
        d2 = np.full(len(Z), np.inf)
    taken = np.zeros(len(Z), dtype=bool)
    picks = []
    for _ in range(count):
        w = np.where(taken, 0.0, d2)
        if np.isinf(w).any():
            w = np.where(taken, 0.0, 1.0)  # nothing to measure against yet
        total = w.sum()
        if total <= 0:
            w = (~taken).astype(np.float64)
            total = w.sum()
        i = int(rng.choice(len(Z), p=w / total))
        picks.append(i)
        taken[i] = True
        d2 = np.minimum(d2, ((Z - Z[i]) ** 2).sum(axis=1))
    return Z[picks].copy()


def ss_kmeans(Z, labels, k, seed=0):
    """Lloyd iterations with labeled rows pinned to their class centroid.

    Anchored centroids start at the class means and free ones by k-means++.
    Updates are plain means of the rows assigned to a centroid. An empty free
    cluster is re-seeded at the unlabeled row farthest from its centroid.
    """
    Z = _check_unit_rows(Z)
    labels, classes = _split_labels(labels, len(Z))
    n_anchor = len(classes)
    if k < n_anchor:
        raise InvalidInputError(f"k={k} is below the {n_anchor} labeled classes")
    if k > len(Z):
        raise InvalidInputError(f"k={k} exceeds the {len(Z)} samples")
    rng = np.random.default_rng(seed)
    labeled = labels != UNLABELED
    pinned = np.searchsorted(classes, labels[labeled])
    anchors = class_means(Z[labeled], labels[labeled])[1] if n_anchor else np.zeros((0, Z.shape[1]))
    centroids = np.concatenate([anchors, kmeanspp_init(Z, k - n_anchor, rng, anchors)])

    assign = np.full(len(Z), -1)
    it = 0
    for it in range(1, MAX_ITER + 1):
        d2 = cdist(Z, centroids, "sqeuclidean")
        new = d2.argmin(axis=1)
        new[labeled] = pinned
        for j in range(n_anchor, k):
            if not np.any(new == j):
                free = np.flatnonzero(~labeled)
                if len(free) == 0:
                    break
                far = free[np.argmax(d2[free, new[free]])]
                new[far] = j
        stable = np.array_equal(new, assign)
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = Z[members].mean(axis=0)
        if stable:
            break
    inertia = float(((Z - centroids[assign]) ** 2).sum())
    return ClusterModel(centroids, n_anchor, assign, inertia, classes, it)


def hungarian(cost, pad=None):
    """Minimum-cost assignment; returns ``perm`` with row i matched to column perm[i].

    A rectangular matrix is padded to square with a constant larger than any
    entry, so the padded rows/columns absorb the surplus.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidInputError("cost must be a matrix")
    if not np.all(np.isfinite(cost)):
        raise InvalidInputError("cost entries must be finite")
    n = max(cost.shape)
    if cost.shape[0] != cost.shape[1]:
        fill = pad if pad is not None else (np.abs(cost).max() + 1) * n if cost.size else 0.0
        square = np.full((n, n), fill)
        square[:cost.shape[0], :cost.shape[1]] = cost
        cost = square
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return perm


def matched_accuracy(pred, true):
    """Fraction of rows whose cluster maps to their class under the best one-to-one map."""
    from .metrics import contingency

    table = contingency(pred, true)
    perm = hungarian(-table)
    hits = sum(table[r, c] for r, c in enumerate(perm) if r < table.shape[0] and c < table.shape[1])
    return float(hits / table.sum())


def acc_of_k(Z, labels, k, seed=0, model=None):
    """Hungarian-matched accuracy of the labeled rows for one ss-k-means run.

    Pinned assignments would trivially score 1, so each labeled row is scored
    by its nearest converged centroid instead.
    """
    Z = _check_unit_rows(Z)
    labels, classes = _split_labels(labels, len(Z))
    if len(classes) == 0:
        raise InvalidInputError("ACC needs labeled rows")
    model = model or ss_kmeans(Z, labels, k, seed)
    labeled = labels != UNLABELED
    nearest = cdist(Z[labeled], model.centroids, "sqeuclidean").argmin(axis=1)
    return matched_accuracy(nearest, labels[labeled])


def silhouette(Z, assign):
    """Mean silhouette under Euclidean distance; rows in singleton clusters score 0."""
    assign = np.asarray(assign)
    ids = np.unique(assign)
    if len(ids) < 2:
        return 0.0
    D = cdist(Z, Z)
    sizes = np.array([(assign == c).sum() for c in ids])
    # mean distance from each row to every cluster
    sums = np.stack([D[:, assign == c].sum(axis=1) for c in ids], axis=1)
    own = np.searchsorted(ids, assign)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(len(Z)), own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / sizes
    other[np.arange(len(Z)), own] = np.inf
    b = other.min(axis=1)
    s = np.where(own_size > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s.mean())


@dataclass
class KEstimate:
    k_hat: int
    c_u: int
    acc_curve: list      # [(k, mean ACC)]
    silhouettes: dict    # k → mean silhouette, for k tied at the best ACC


def estimate_k(Z, labels, k_range, seed=0, restarts=3, search="exhaustive", acc_tol=0.02):
    """Pick K̂ maximising mean ACC(k) over ``restarts`` runs per k.

    ACC cannot separate k values at or below the truth (merging unlabeled
    clusters never disturbs the labeled rows), so every k whose ACC is within
    ``acc_tol`` of the best counts as tied. Tied values are ranked by mean
    silhouette of the full clustering, then by smaller k. ``search="brent"`` evaluates ACC lazily along a parabolic
    search over the integer grid; the tie-break set is then restricted to
    the evaluated k values.
    """
    Z = _check_unit_rows(Z)
    labels, classes = _split_labels(labels, len(Z))
    lo, hi = int(k_range[0]), int(k_range[-1])
    if hi < lo:
        raise InvalidInputError(f"empty k range [{lo}, {hi}]")
    if lo < len(classes):
        raise InvalidInputError(f"k range starts below the {len(classes)} labeled classes")
    if hi > len(Z):
        raise InvalidInputError(f"k_max={hi} exceeds the {len(Z)} samples")
    seeds = np.random.SeedSequence(seed).spawn(hi - lo + 1)
    runs = {}

    def evaluate(k):
        if k not in runs:
            ss = seeds[k - lo].generate_state(restarts)
            models = [ss_kmeans(Z, labels, k, int(s)) for s in ss]
            runs[k] = (float(np.mean([acc_of_k(Z, labels, k, model=m) for m in models])), models)
        return runs[k][0]

    if search == "exhaustive":
        for k in range(lo, hi + 1):
            evaluate(k)
    elif search == "brent":
        _parabolic_integer_max(evaluate, lo, hi)
    else:
        raise InvalidInputError(f"unknown search {search!r}")

    curve = sorted((k, v[0]) for k, v in runs.items())
    best = max(acc for _, acc in curve)
    tied = [k for k, acc in curve if acc >= best - acc_tol]
    sil = {k: float(np.mean([silhouette(Z, m.assignments) for m in runs[k][1]])) for k in tied}
    k_hat = min(tied, key=lambda k: (-sil[k], k))
    return KEstimate(k_hat, k_hat - len(classes), curve, sil)


def _parabolic_integer_max(f, lo, hi):
    """Golden-section bracketing with parabolic steps on an integer grid; f is memoised by the caller."""
    a, b = lo, hi
    while b - a > 2:
        m1 = a + int(round((b - a) * 0.382))
        m2 = a + int(round((b - a) * 0.618))
        if m1 == m2:
            m2 = m1 + 1
        f1, f2 = f(m1), f(m2)
        # parabola through (a, m1, b) suggests where to look first
        fa, fb = f(a), f(b)
        den = (m1 - a) * (fb - f1) - (m1 - b) * (fa - f1)
        if den != 0:
            x = m1 - 0.5 * ((m1 - a) ** 2 * (fb - f1) - (m1 - b) ** 2 * (fa - f1)) / den
            xi = int(round(min(max(x, a), b)))
            f(xi)
        if f1 >= f2:
            b = m2
        else:
            a = m1
    for k in range(a, b + 1):
        f(k)


def synthetic_mixture(n_base, n_novel, seed=0, per_class=60, dim=16, separation=6.0,
                      labeled_fraction=0.5):
    """Unit-normalised Gaussian clusters around orthonormal centres.

    Centres are √2 apart and the per-axis spread is √2 / separation, so
    neighbouring centres sit ``separation`` standard deviations apart. Returns
    ``(Z, labels, truth)`` where ``labels`` marks a ``labeled_fraction`` of
    each base class and −1 elsewhere.
    """
    n = n_base + n_novel
    if n > dim:
        raise InvalidInputError(f"{n} orthonormal centres do not fit in {dim} dimensions")
    rng = np.random.default_rng(seed)
    centres = np.linalg.qr(rng.normal(size=(dim, dim)))[0][:n]
    sigma = np.sqrt(2) / separation
    X = np.concatenate([c + sigma * rng.normal(size=(per_class, dim)) for c in centres])
    truth = np.repeat(np.arange(n), per_class)
    labels = np.full(len(truth), UNLABELED)
    for c in range(n_base):
        idx = rng.choice(np.flatnonzero(truth == c), int(labeled_fraction * per_class), replace=False)
        labels[idx] = c
    return X / np.linalg.norm(X, axis=1, keepdims=True), labels, truth
