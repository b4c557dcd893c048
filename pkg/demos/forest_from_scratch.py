"""
Gini trees and a small forest
=============================
"""

import numpy as np

from coilstack.forest import ForestParams, Split, fit_forest, fit_tree, forest_proba, predict_forest


def show(node, depth=0):
    pad = "  " * depth
    if isinstance(node, Split):
        print(f"{pad}x[{node.feature}] <= {node.threshold:.3f}")
        show(node.left, depth + 1)
        show(node.right, depth + 1)
    else:
        print(f"{pad}leaf normal={node.counts[0]} broken={node.counts[1]}")


# the textbook case: one split halfway between 2 and 9
show(fit_tree([[1.0], [2.0], [9.0], [10.0]], [0, 0, 1, 1], ForestParams(n_trees=1, bootstrap=False, max_features=1)))

rng = np.random.default_rng(0)
X = rng.uniform(-1, 1, size=(200, 2))
y = ((X[:, 0] * X[:, 1] > 0) ^ (rng.random(200) < 0.15)).astype(int)
Xt = rng.uniform(-1, 1, size=(1000, 2))
yt = (Xt[:, 0] * Xt[:, 1] > 0).astype(int)

tree = fit_forest(X, y, ForestParams(n_trees=1, bootstrap=False, max_features=2, max_depth=None, min_samples_leaf=1))
forest = fit_forest(X, y, ForestParams(n_trees=50, max_depth=None, min_samples_leaf=1, seed=1))
for name, model in (("single tree", tree), ("50 trees", forest)):
    acc = np.mean((forest_proba(model, Xt) >= 0.5) == yt)
    print(f"{name:12s} test accuracy {acc:.3f}")
print("prediction at (0.5, 0.5):", predict_forest(forest, [0.5, 0.5]))
