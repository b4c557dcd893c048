"""CART classification trees and random forests for two classes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DimensionError

GAIN_TIE_TOL = 1e-12
FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Leaf:
    counts: tuple  # (normal, broken)

    @property
    def prob(self):
        return self.counts[1] / (self.counts[0] + self.counts[1])


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: object
    right: object


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = 8
    min_samples_leaf: int = 2
    max_features: int | None = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ContractViolation("a forest needs at least one tree")
        if self.min_samples_leaf < 1:
            raise ContractViolation("min_samples_leaf must be at least 1")
        if self.max_features is not None and self.max_features < 1:
            raise ContractViolation("max_features must be at least 1")

    def features_per_split(self, d):
        k = math.ceil(math.sqrt(d)) if self.max_features is None else self.max_features
        if k > d:
            raise ContractViolation(f"max_features {k} exceeds the {d} available features")
        return k


def gini(counts):
    total = sum(counts)
    if total <= 0:
        raise ContractViolation("gini of an empty node")
    return 1.0 - sum((c / total) ** 2 for c in counts)


def _best_split(X, y, features, min_leaf):
    """Best (gain, feature, threshold) over ``features``; gains within 1e-12 tie to the lowest pair."""
    n = len(y)
    pos = y.sum()
    parent = 1.0 - (pos / n) ** 2 - ((n - pos) / n) ** 2
    candidates = []
    for f in sorted(int(f) for f in features):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        n_left = np.arange(1, n)
        pos_left = np.cumsum(ys)[:-1]
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        nl, pl = n_left[valid], pos_left[valid]
        nr, pr = n - nl, pos - pl
        gains = parent - (nl * _gini2(pl, nl) + nr * _gini2(pr, nr)) / n
        thresholds = (xs[:-1][valid] + xs[1:][valid]) / 2
        candidates.append((f, gains, thresholds))
    if not candidates:
        return None
    top = max(g.max() for _, g, _ in candidates)
    for f, gains, thresholds in candidates:
        hits = np.flatnonzero(gains >= top - GAIN_TIE_TOL)
        if len(hits):
            i = int(hits[0])
            return float(gains[i]), f, float(thresholds[i])


def _gini2(pos, total):
    p = pos / total
    return 1.0 - p**2 - (1.0 - p) ** 2


def fit_tree(X, y, params: ForestParams = ForestParams(n_trees=1, bootstrap=False), rng=None):
    """Grow one tree by greedy Gini gain.

    A node becomes a leaf when it is pure, at ``max_depth``, or when no
    threshold leaves ``min_samples_leaf`` rows on both sides. Thresholds are
    midpoints between consecutive distinct values; ``x <= threshold`` goes left.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ContractViolation("fit_tree needs at least one row")
    if len(y) != len(X):
        raise DimensionError(f"{len(X)} rows but {len(y)} labels")
    d = X.shape[1]
    k = params.features_per_split(d)
    if rng is None:
        rng = np.random.default_rng(params.seed)

    def grow(idx, depth):
        yi = y[idx]
        pos = int(yi.sum())
        leaf = Leaf((len(idx) - pos, pos))
        if pos == 0 or pos == len(idx):
            return leaf
        if params.max_depth is not None and depth >= params.max_depth:
            return leaf
        feats = range(d) if k == d else rng.choice(d, size=k, replace=False)
        best = _best_split(X[idx], yi, feats, params.min_samples_leaf)
        if best is None:
            return leaf
        _, f, t = best
        go_left = X[idx, f] <= t
        return Split(f, t, grow(idx[go_left], depth + 1), grow(idx[~go_left], depth + 1))

    return grow(np.arange(len(X)), 0)


def tree_proba(node, row):
    while isinstance(node, Split):
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node.prob


@dataclass
class Forest:
    trees: list
    n_features: int
    params: ForestParams = field(default_factory=ForestParams)


def fit_forest(X, y, params: ForestParams = ForestParams()) -> Forest:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ContractViolation("fit_forest needs at least one row")
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    trees = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        if params.bootstrap:
            idx = rng.integers(0, len(X), size=len(X))
            trees.append(fit_tree(X[idx], y[idx], params, rng))
        else:
            trees.append(fit_tree(X, y, params, rng))
    return Forest(trees, X.shape[1], params)


def forest_proba(forest: Forest, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise DimensionError(f"forest expects rows of width {forest.n_features}, got shape {X.shape}")
    return np.array([sum(tree_proba(t, row) for t in forest.trees) / len(forest.trees) for row in X])


def predict_forest(forest: Forest, row):
    """(class, probability of broken); probability exactly 0.5 counts as broken."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise DimensionError(f"expected one row, got shape {row.shape}")
    p = float(forest_proba(forest, row[None])[0])
    return int(p >= 0.5), p


# ------------------------------------------------------------ serialization


def _node_to_list(node, out):
    if isinstance(node, Leaf):
        out.append(["leaf", int(node.counts[0]), int(node.counts[1])])
    else:
        out.append(["split", node.feature, node.threshold])
        _node_to_list(node.left, out)
        _node_to_list(node.right, out)
    return out


def _node_from_list(items, pos):
    item = items[pos]
    if item[0] == "leaf":
        return Leaf((item[1], item[2])), pos + 1
    left, pos2 = _node_from_list(items, pos + 1)
    right, pos3 = _node_from_list(items, pos2)
    return Split(int(item[1]), float(item[2]), left, right), pos3


def forest_to_json(forest: Forest):
    """Pre-order node lists per tree; floats keep their exact repr."""
    doc = {
        "format": "coilstack-forest",
        "version": FOREST_FORMAT_VERSION,
        "n_features": forest.n_features,
        "params": {k: getattr(forest.params, k) for k in forest.params.__dataclass_fields__},
        "trees": [_node_to_list(t, []) for t in forest.trees],
    }
    return json.dumps(doc, sort_keys=True)


def forest_from_json(text) -> Forest:
    doc = json.loads(text)
    if doc.get("format") != "coilstack-forest" or doc.get("version") != FOREST_FORMAT_VERSION:
        raise ValueError("not a coilstack forest document")
    trees = []
    for items in doc["trees"]:
        node, end = _node_from_list(items, 0)
        if end != len(items):
            raise ValueError("trailing nodes in serialized tree")
        trees.append(node)
    return Forest(trees, doc["n_features"], ForestParams(**doc["params"]))
