"""Random Forest classifier (bagged CART trees, Gini splits).

Each tree trains on a bootstrap resample; node splits minimize Gini impurity
over sqrt(n_features) randomly drawn candidate features; growth stops at
pure nodes or when a child would fall below min_leaf samples. Leaves store
class histograms of the bootstrap samples they received. Deterministic for
a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAF = -1


@dataclass
class Tree:
    """Flat array representation of one decision tree."""

    feature: np.ndarray    # (n_nodes,) int; LEAF marks leaves
    threshold: np.ndarray  # (n_nodes,) float
    left: np.ndarray       # (n_nodes,) int child ids
    right: np.ndarray      # (n_nodes,) int child ids
    histogram: np.ndarray  # (n_nodes, n_classes) sample counts

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id for each row of X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.nonzero(active)[0]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] != LEAF
        return node


@dataclass
class ForestModel:
    trees: list[Tree]
    classes: np.ndarray       # sorted class labels
    n_trees: int
    min_leaf: int
    seed: int
    n_features: int

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected (n, {self.n_features}) features, got {X.shape}")
        probs = np.zeros((X.shape[0], self.classes.size))
        for tree in self.trees:
            leaf = tree.apply(X)
            hist = tree.histogram[leaf]
            probs += hist / hist.sum(axis=1, keepdims=True)
        return probs / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes[np.argmax(probs, axis=1)]


class _TreeBuilder:
    def __init__(self, X, y, n_classes, min_leaf, max_features, rng):
        self.X = X
        self.y = y
        self.n_classes = n_classes
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.rng = rng
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.hist: list[np.ndarray] = []

    def build(self, idx: np.ndarray) -> int:
        root = self._new_node(idx)
        stack = [(idx, root)]
        while stack:
            node_idx, node = stack.pop()
            split = self._best_split(node_idx, node)
            if split is None:
                continue
            f, thr = split
            mask = self.X[node_idx, f] <= thr
            self.feature[node] = f
            self.threshold[node] = thr
            left = self._new_node(node_idx[mask])
            right = self._new_node(node_idx[~mask])
            self.left[node] = left
            self.right[node] = right
            # right pushed first so the left branch is explored first (LIFO),
            # keeping node numbering independent of data values
            stack.append((node_idx[~mask], right))
            stack.append((node_idx[mask], left))
        return root

    def _new_node(self, idx) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.hist.append(np.bincount(self.y[idx], minlength=self.n_classes).astype(float))
        return len(self.feature) - 1

    def _best_split(self, idx, node: int):
        n = idx.size
        if n < 2 * self.min_leaf:
            return None
        if np.count_nonzero(self.hist[node]) <= 1:
            return None  # pure node
        feats = self.rng.permutation(self.X.shape[1])[: self.max_features]
        Xs = self.X[idx][:, feats]
        order = np.argsort(Xs, axis=0, kind="stable")
        sorted_x = np.take_along_axis(Xs, order, axis=0)
        sorted_y = self.y[idx][order]                       # (n, k)
        onehot = sorted_y[:, :, None] == np.arange(self.n_classes)
        cum = np.cumsum(onehot, axis=0, dtype=np.float64)   # (n, k, C)

        left_counts = cum[:-1]                              # split after position i+1 samples
        n_l = np.arange(1, n, dtype=np.float64)[:, None]
        n_r = n - n_l
        sq_l = (left_counts**2).sum(axis=2)
        right_counts = cum[-1][None, :, :] - left_counts
        sq_r = (right_counts**2).sum(axis=2)
        gini = (n_l - sq_l / n_l) + (n_r - sq_r / n_r)      # (n-1, k), scaled by n

        invalid = sorted_x[1:] <= sorted_x[:-1]             # no room for a threshold
        pos = np.arange(1, n)[:, None]
        invalid |= (pos < self.min_leaf) | (pos > n - self.min_leaf)
        gini = np.where(invalid, np.inf, gini)

        flat = int(np.argmin(gini))
        if not np.isfinite(gini.ravel()[flat]):
            return None
        i, j = np.unravel_index(flat, gini.shape)
        thr = 0.5 * (sorted_x[i, j] + sorted_x[i + 1, j])
        return int(feats[j]), float(thr)

    def to_tree(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=float),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            histogram=np.stack(self.hist),
        )


def forest_train(features: np.ndarray, labels, n_trees: int, min_leaf: int,
                 seed: int) -> ForestModel:
    """Train a random forest; deterministic given the seed.

    Raises on single-class input.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least 2 classes to train")
    if n_trees < 1 or min_leaf < 1:
        raise ValueError("n_trees and min_leaf must be >= 1")
    n, d = X.shape
    max_features = max(1, int(round(np.sqrt(d))))
    ss = np.random.SeedSequence(seed)
    trees = []
    for child in ss.spawn(n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, n, size=n)
        builder = _TreeBuilder(X, y, classes.size, min_leaf, max_features, rng)
        builder.build(boot)
        trees.append(builder.to_tree())
    return ForestModel(trees=trees, classes=classes, n_trees=n_trees,
                       min_leaf=min_leaf, seed=seed, n_features=d)


def forest_predict(model: ForestModel, features: np.ndarray):
    """Labels and class probabilities for a feature matrix."""
    probs = model.predict_proba(np.asarray(features, dtype=float))
    return model.classes[np.argmax(probs, axis=1)], probs
