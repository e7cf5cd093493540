"""Detection and clustering metrics: AUROC, NMI, ARI and Hungarian-matched F1."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInputError, UndefinedMetricError


def auroc(scores, labels):
    """Mann–Whitney AUROC with midranks for ties; label 1 is the positive class."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise InvalidInputError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pixel_auroc(maps, masks, stride=4):
    """AUROC over pixels of a batch of maps, subsampled by ``stride`` in both axes."""
    maps = np.asarray(maps)
    masks = np.asarray(masks)
    if maps.shape != masks.shape:
        raise InvalidInputError(f"maps {maps.shape} and masks {masks.shape} differ")
    sl = (Ellipsis, slice(None, None, stride), slice(None, None, stride))
    return auroc(maps[sl], masks[sl] > 0)


def contingency(pred, true):
    """Cluster × class count table, rows/columns in sorted order of the ids."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise InvalidInputError(f"{pred.size} predictions but {true.size} labels")
    if pred.size == 0:
        raise InvalidInputError("empty labelling")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(true, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(table):
    """Mutual information over the arithmetic mean of the two entropies."""
    table = np.asarray(table, dtype=np.float64)
    n = table.sum()
    if n < 2:
        raise InvalidInputError("NMI needs at least two samples")
    rows, cols = table.sum(axis=1), table.sum(axis=0)
    h_r, h_c = _entropy(rows), _entropy(cols)
    if h_r == 0 and h_c == 0:
        return 1.0  # both partitions trivial, hence identical
    nz = table > 0
    mi = float((table[nz] / n * np.log(table[nz] * n / np.outer(rows, cols)[nz])).sum())
    return max(0.0, mi / ((h_r + h_c) / 2))


def _pairs(x):
    return x * (x - 1) / 2


def ari(table):
    """Adjusted Rand index by pair counting; two trivial identical partitions give 1."""
    table = np.asarray(table, dtype=np.float64)
    n = table.sum()
    if n < 2:
        raise InvalidInputError("ARI needs at least two samples")
    index = _pairs(table).sum()
    a = _pairs(table.sum(axis=1)).sum()
    b = _pairs(table.sum(axis=0)).sum()
    expected = a * b / _pairs(n)
    top = (a + b) / 2
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def match_clusters(pred, true):
    """Hungarian map cluster id → class id maximising agreement; unmatched clusters are absent.

    Rows are put in lexicographic order of their counts before matching, so
    that among equally good matchings the choice does not depend on the
    cluster ids.
    """
    from .class_count import hungarian

    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    p_ids, t_ids = np.unique(pred), np.unique(true)
    table = contingency(pred, true)
    order = np.lexsort(table.T[::-1])
    p_ids, table = p_ids[order], table[order]
    perm = hungarian(-table)
    return {p_ids[r]: t_ids[c] for r, c in enumerate(perm)
            if r < len(p_ids) and c < len(t_ids)}


def f1_hungarian(pred, true):
    """Macro F1 over true classes after optimally matching clusters to classes."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.size == 0 or true.size == 0:
        raise InvalidInputError("empty labelling")
    mapping = match_clusters(pred, true)
    mapped = np.array([mapping.get(p, None) for p in pred], dtype=object)
    scores = []
    for c in np.unique(true):
        tp = int(np.sum((mapped == c) & (true == c)))
        fp = int(np.sum((mapped == c) & (true != c)))
        fn = int(np.sum((mapped != c) & (true == c)))
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))
