import numpy as np
import pytest

from vimu.forest import LEAF, forest_predict, forest_train


def separable_1d(n=60):
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.uniform(0, 1, (n // 2, 1)), rng.uniform(2, 3, (n // 2, 1))])
    y = np.array(["a"] * (n // 2) + ["b"] * (n // 2))
    return X, y


def xor_data(n=200, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    y = np.where((X[:, 0] > 0) ^ (X[:, 1] > 0), "pos", "neg")
    return X, y


def test_separable_training_accuracy():
    X, y = separable_1d()
    model = forest_train(X, y, n_trees=10, min_leaf=1, seed=0)
    pred, _ = forest_predict(model, X)
    assert (pred == y).mean() == 1.0


def test_single_tree_min_leaf_n_is_stump():
    X, y = separable_1d(40)
    model = forest_train(X, y, n_trees=1, min_leaf=40, seed=0)
    tree = model.trees[0]
    assert tree.n_nodes == 1
    assert tree.feature[0] == LEAF
    pred, _ = forest_predict(model, X)
    # majority class of the bootstrap sample, constant prediction
    assert len(set(pred)) == 1


def test_xor_generalization():
    X, y = xor_data(200, seed=2)
    Xt, yt = xor_data(300, seed=3)
    model = forest_train(X, y, n_trees=30, min_leaf=1, seed=4)
    pred, _ = forest_predict(model, Xt)
    assert (pred == yt).mean() > 0.9


def test_single_class_errors():
    X = np.random.default_rng(5).normal(size=(20, 3))
    with pytest.raises(ValueError):
        forest_train(X, ["only"] * 20, n_trees=3, min_leaf=1, seed=0)


def test_probabilities_sum_to_one():
    X, y = xor_data(100, seed=6)
    model = forest_train(X, y, n_trees=7, min_leaf=2, seed=1)
    _, probs = forest_predict(model, X)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_single_tree_prediction_is_leaf_majority():
    X, y = separable_1d(30)
    model = forest_train(X, y, n_trees=1, min_leaf=1, seed=2)
    tree = model.trees[0]
    leaf = tree.apply(X)
    hist = tree.histogram[leaf]
    expected = model.classes[np.argmax(hist, axis=1)]
    pred, _ = forest_predict(model, X)
    np.testing.assert_array_equal(pred, expected)


def test_leaf_histograms_sum_to_sample_counts():
    X, y = xor_data(120, seed=7)
    model = forest_train(X, y, n_trees=5, min_leaf=3, seed=3)
    for tree in model.trees:
        # root holds the full bootstrap: n samples
        assert tree.histogram[0].sum() == len(y)
        leaves = tree.feature == LEAF
        # leaves partition the bootstrap sample
        assert tree.histogram[leaves].sum() == len(y)
        for node in range(tree.n_nodes):
            if tree.feature[node] != LEAF:
                l, r = tree.left[node], tree.right[node]
                np.testing.assert_allclose(
                    tree.histogram[node], tree.histogram[l] + tree.histogram[r])


def test_min_leaf_respected():
    X, y = xor_data(150, seed=8)
    model = forest_train(X, y, n_trees=5, min_leaf=10, seed=4)
    for tree in model.trees:
        leaves = tree.feature == LEAF
        assert tree.histogram[leaves].sum(axis=1).min() >= 10


def test_deterministic_given_seed():
    X, y = xor_data(150, seed=9)
    a = forest_train(X, y, n_trees=10, min_leaf=2, seed=42)
    b = forest_train(X, y, n_trees=10, min_leaf=2, seed=42)
    for ta, tb in zip(a.trees, b.trees):
        np.testing.assert_array_equal(ta.feature, tb.feature)
        np.testing.assert_array_equal(ta.threshold, tb.threshold)
        np.testing.assert_array_equal(ta.histogram, tb.histogram)
    Xq = np.random.default_rng(10).uniform(-1, 1, (50, 2))
    pa, proba = forest_predict(a, Xq)
    pb, probb = forest_predict(b, Xq)
    np.testing.assert_array_equal(pa, pb)
    np.testing.assert_array_equal(proba, probb)


def test_different_seeds_differ():
    X, y = xor_data(150, seed=11)
    a = forest_train(X, y, n_trees=5, min_leaf=1, seed=1)
    b = forest_train(X, y, n_trees=5, min_leaf=1, seed=2)
    same = all(
        ta.n_nodes == tb.n_nodes and np.array_equal(ta.threshold, tb.threshold)
        for ta, tb in zip(a.trees, b.trees)
    )
    assert not same


def test_dimension_mismatch_on_predict():
    X, y = separable_1d()
    model = forest_train(X, y, n_trees=3, min_leaf=1, seed=0)
    with pytest.raises(ValueError):
        forest_predict(model, np.zeros((5, 7)))
