import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icnd.errors import InvalidInputError, UndefinedMetricError
from icnd.metrics import ari, auroc, contingency, f1_hungarian, nmi, pixel_auroc


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def pair_count_ari(pred, true):
    a = b = c = d = 0
    for i, j in itertools.combinations(range(len(pred)), 2):
        same_p, same_t = pred[i] == pred[j], true[i] == true[j]
        if same_p and same_t:
            a += 1
        elif same_p:
            b += 1
        elif same_t:
            c += 1
        else:
            d += 1
    den = (a + b) * (b + d) + (a + c) * (c + d)
    return 1.0 if den == 0 else 2 * (a * d - b * c) / den


def direct_nmi(pred, true):
    n = len(pred)
    joint, cp, ct = Counter(zip(pred, true)), Counter(pred), Counter(true)
    mi = sum(v / n * math.log(v * n / (cp[p] * ct[t])) for (p, t), v in joint.items())
    hp = -sum(v / n * math.log(v / n) for v in cp.values())
    ht = -sum(v / n * math.log(v / n) for v in ct.values())
    return mi / ((hp + ht) / 2)


# ---------------------------------------------------------------- AUROC

def test_auroc_trivials():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auroc(np.ones(10), np.arange(10) % 2) == 0.5


def test_auroc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(11)
    for _ in range(100):
        s = rng.integers(0, 20, size=200) / 4.0  # coarse grid forces ties
        y = rng.random(200) < rng.uniform(0.2, 0.8)
        assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_auroc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=60).round(1)
    y = np.r_[np.ones(30), np.zeros(30)]
    assert auroc(np.exp(3 * s) + 7, y) == auroc(s, y)


def test_auroc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(InvalidInputError):
        auroc([0.1, 0.2], [1])


def test_pixel_auroc_subsamples():
    maps = np.zeros((2, 8, 8))
    masks = np.zeros((2, 8, 8))
    maps[0, 0, 0] = masks[0, 0, 0] = 1
    masks[1, 1, 1] = 1  # off the stride-4 grid, so ignored
    assert pixel_auroc(maps, masks, stride=4) == 1.0
    assert pixel_auroc(maps, masks, stride=1) == pytest.approx(pairwise_auroc(maps.ravel(), masks.ravel()))


# ---------------------------------------------------------------- NMI / ARI

def test_contingency_counts():
    t = contingency([0, 0, 1, 2, 2, 2], ["a", "b", "b", "a", "a", "b"])
    np.testing.assert_array_equal(t, [[1, 1], [0, 1], [2, 1]])


def test_identical_partitions_score_one():
    p = [0, 0, 1, 1, 2, 2, 2]
    q = [5, 5, 9, 9, 1, 1, 1]
    t = contingency(p, q)
    assert nmi(t) == pytest.approx(1.0, abs=1e-15)
    assert ari(t) == pytest.approx(1.0, abs=1e-15)


def test_single_cluster_is_chance_level():
    t = contingency(np.zeros(12), np.arange(12) % 3)
    assert ari(t) == 0.0
    assert nmi(t) == 0.0


def test_trivial_partitions_defined_as_one():
    t = contingency(np.zeros(5), np.zeros(5))
    assert nmi(t) == 1.0 and ari(t) == 1.0
    with pytest.raises(InvalidInputError):
        nmi(contingency([0], [0]))


@pytest.mark.parametrize("seed", range(10))
def test_nmi_ari_match_direct_formulas(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, size=50).tolist()
    true = rng.integers(0, 3, size=50).tolist()
    t = contingency(pred, true)
    assert abs(nmi(t) - direct_nmi(pred, true)) <= 1e-12
    assert abs(ari(t) - pair_count_ari(pred, true)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=25), st.lists(st.integers(0, 3), min_size=25, max_size=25))
def test_ari_one_iff_same_partition(p, q):
    q = q[:len(p)]
    same = len(set(zip(p, q))) == len(set(p)) == len(set(q))
    assert (ari(contingency(p, q)) == pytest.approx(1.0, abs=1e-12)) == same


# ---------------------------------------------------------------- F1

def brute_force_macro_f1(pred, true):
    pred, true = np.asarray(pred), np.asarray(true)
    clusters, classes = np.unique(pred), np.unique(true)
    best = 0.0
    slots = list(clusters) + [None] * max(0, len(classes) - len(clusters))
    for assign in itertools.permutations(slots, len(classes)):
        f1s = []
        for c, k in zip(classes, assign):
            tp = int(np.sum((pred == k) & (true == c))) if k is not None else 0
            fp = int(np.sum((pred == k) & (true != c))) if k is not None else 0
            fn = int(np.sum(true == c)) - tp
            f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
        best = max(best, float(np.mean(f1s)))
    return best


def test_f1_trivials():
    assert f1_hungarian([2, 2, 0, 0, 1], [0, 0, 1, 1, 2]) == 1.0
    assert f1_hungarian(np.zeros(10), np.arange(10) % 2) == pytest.approx(1 / 3)


def test_f1_relabel_invariant():
    rng = np.random.default_rng(5)
    pred = rng.integers(0, 4, 40)
    true = rng.integers(0, 3, 40)
    relabel = np.array([7, 3, 11, 5])[pred]
    assert f1_hungarian(relabel, true) == f1_hungarian(pred, true)


@pytest.mark.parametrize("seed", range(8))
def test_f1_matching_agrees_with_brute_force_on_count_matching(seed):
    # the Hungarian map maximises matched counts; check that it also attains the oracle's F1
    # whenever the count-optimal map is unique, which holds for these dominant-diagonal tables
    rng = np.random.default_rng(seed)
    true = rng.integers(0, 3, 60)
    pred = np.where(rng.random(60) < 0.8, true, rng.integers(0, 3, 60))
    pred = np.array([2, 0, 1])[pred]
    assert f1_hungarian(pred, true) == pytest.approx(brute_force_macro_f1(pred, true))
