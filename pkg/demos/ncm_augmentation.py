"""
Permuting channels of a noise covariance matrix
===============================================

Relabelling the 20 channels of a coil gives P M P^T: the same spectrum,
trace and pairwise covariances in a new order. Broken coils are rare, so
permuted copies of their matrices are used to rebalance training data.
"""

import numpy as np

from coilstack.data import BROKEN, SyntheticSpec, generate_synthetic
from coilstack.preprocessing import augment_ncm, augmentation_count, balance_to_ratio

ds = generate_synthetic(SyntheticSpec(coils=300, seed=3))
samples = list(ds.ncm_samples())
broken = [s for s in samples if s.label == BROKEN]
print(f"{len(samples)} matrices, {len(broken)} broken")

m = broken[0].matrix
copies = augment_ncm(m, rng=np.random.default_rng(0))
print("copies per matrix at the default count:", len(copies))

eig = np.linalg.eigvalsh(m)
worst = max(np.abs(np.linalg.eigvalsh(c) - eig).max() for c in copies)
print(f"largest eigenvalue drift {worst:.2e}, trace {np.trace(m):.4f} vs {np.trace(copies[0]):.4f}")

# the smallest k with (b + k) / (t + k) >= 0.2
k = augmentation_count(len(broken), len(samples), 0.2)
balanced = balance_to_ratio(samples, 0.2, np.random.default_rng(1))
n_broken = sum(s.label == BROKEN for s in balanced)
print(f"k = {k}; after balancing {n_broken}/{len(balanced)} = {n_broken / len(balanced):.3f} broken")
print("provenance of the last sample:", balanced[-1].provenance)
