"""Feature standardization and permutation augmentation of covariance matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation, DegenerateFeatureError, DimensionError


@dataclass
class Normalizer:
    """Per-feature mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_normalizer(rows, names=None) -> Normalizer:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionError(f"expected (rows, features), got {rows.shape}")
    if len(rows) < 2:
        raise ContractViolation("fitting a normalizer needs at least 2 rows")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    for j, s in enumerate(std):
        if not s > 0:
            name = names[j] if names is not None else f"column {j}"
            raise DegenerateFeatureError(f"feature {name} is constant; cannot scale to unit variance")
    return Normalizer(mean, std)


def fit_matrix_normalizer(matrices) -> Normalizer:
    """One mean/std over every entry, so permuting before or after scaling commutes."""
    m = np.asarray(matrices, dtype=np.float64)
    return fit_normalizer(m.reshape(-1, 1), names=["matrix entries"])


# ------------------------------------------------------------- augmentation


def permute_matrix(matrix, perm):
    """Return P M P^T with ``out[perm[i], perm[j]] == matrix[i, j]``."""
    matrix = np.asarray(matrix)
    perm = np.asarray(perm)
    out = np.empty_like(matrix)
    out[np.ix_(perm, perm)] = matrix
    return out


def sample_permutations(n, count, rng, exclude=()):
    """``count`` distinct non-identity permutations of ``range(n)``, none in ``exclude``."""
    available = math.factorial(n) - 1 - len(exclude)
    if count > available:
        raise ContractViolation(f"{count} distinct non-identity permutations requested but only {available} exist for n={n}")
    identity = tuple(range(n))
    seen = set(exclude)
    out = []
    while len(out) < count:
        p = tuple(int(i) for i in rng.permutation(n))
        if p == identity or p in seen:
            continue
        seen.add(p)
        out.append(p)
    return out


def permutation_augment(matrix, count=None, rng=None):
    """Like :func:`augment_ncm` but returns ``(permutation, matrix)`` pairs."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionError(f"expected a square matrix, got {matrix.shape}")
    n = matrix.shape[0]
    if count is None:
        count = n - 1
    if rng is None:
        raise ContractViolation("augmentation needs a seeded generator")
    return [(p, permute_matrix(matrix, p)) for p in sample_permutations(n, count, rng)]


def augment_ncm(matrix, count=None, rng=None):
    """Symmetrically permuted copies of ``matrix``; ``count`` defaults to N-1."""
    return [m for _, m in permutation_augment(matrix, count, rng)]


def augmentation_count(n_broken, n_total, target_ratio):
    """Smallest k with (n_broken + k) / (n_total + k) >= target_ratio."""
    if not 0 < target_ratio < 1:
        raise ContractViolation(f"target ratio must lie in (0, 1), got {target_ratio}")
    if n_total and n_broken / n_total >= target_ratio:
        return 0
    k = max(0, math.floor((target_ratio * n_total - n_broken) / (1 - target_ratio)) - 1)
    while (n_broken + k) / (n_total + k) < target_ratio:
        k += 1
    return k


def balance_to_ratio(samples, target_ratio, rng, full_expansion=False):
    """Append permuted copies of broken matrices until they make up ``target_ratio``.

    Copies are drawn round-robin over the broken originals, each with a
    permutation not used before for that original in this call. With
    ``full_expansion`` every broken original instead gets N-1 copies.
    """
    from .data import BROKEN, AUGMENTED

    samples = list(samples)
    broken = [s for s in samples if s.label == BROKEN and s.provenance != AUGMENTED]
    if not broken:
        raise ContractViolation("balancing needs at least one broken sample")
    n_broken = sum(s.label == BROKEN for s in samples)
    n = broken[0].matrix.shape[0]
    if full_expansion:
        plan = [n - 1] * len(broken)
    else:
        k = augmentation_count(n_broken, len(samples), target_ratio)
        plan = [k // len(broken) + (i < k % len(broken)) for i in range(len(broken))]
    extra = []
    used = [[] for _ in broken]
    rounds = max(plan, default=0)
    for r in range(rounds):
        for i, src in enumerate(broken):
            if r >= plan[i]:
                continue
            (perm,) = sample_permutations(n, 1, rng, exclude=used[i])
            used[i].append(perm)
            extra.append(replace(src, matrix=permute_matrix(src.matrix, perm), provenance=AUGMENTED))
    return samples + extra
