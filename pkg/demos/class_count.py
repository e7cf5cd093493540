"""
How many classes are there?
===========================

Three labeled Gaussian classes and two unlabeled ones, on the unit sphere.
Anchored semi-supervised k-means is run for each candidate k; the labeled
rows' matched accuracy, with a silhouette tie-break, picks the total count.
"""
from icnd.class_count import estimate_k, synthetic_mixture

Z, labels = synthetic_mixture(3, 2, seed=0)[:2]
print("rows:", Z.shape, " labeled:", int((labels >= 0).sum()))

est = estimate_k(Z, labels, (3, 10), seed=0)
for k, acc in est.acc_curve:
    print(f"k={k:2d}  ACC={acc:.3f}")
print("tied candidates and silhouettes:", {k: round(v, 3) for k, v in est.silhouettes.items()})
print(f"K = {est.k_hat}, novel classes = {est.c_u}")
