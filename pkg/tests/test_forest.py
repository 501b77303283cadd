import numpy as np
import pytest

from cardiokit.errors import EvaluationError, FitError, ParameterError, ShapeError
from cardiokit.forest import (Forest, ForestParams, classification_metrics, evaluate, fit_arrays, fit_forest,
                              gini_importance)
from cardiokit.matrix import FeatureMatrix
from oracles import naive_cart, naive_predict


def _as_nested(tr, node=0):
    f = tr["feature"][node]
    if f < 0:
        return None
    return (int(f), float(tr["threshold"][node]), _as_nested(tr, tr["left"][node]),
            _as_nested(tr, tr["right"][node]))


def _strip(tree):
    if not isinstance(tree, tuple):
        return None
    j, thr, l, r = tree
    return (int(j), float(thr), _strip(l), _strip(r))


@pytest.mark.parametrize("seed", range(12))
def test_single_tree_equals_naive_cart(seed):
    rng = np.random.default_rng(seed)
    n, d, k = int(rng.integers(10, 51)), int(rng.integers(1, 6)), int(rng.integers(2, 4))
    X = rng.normal(size=(n, d))
    if seed % 3 == 0:
        X = np.round(X)  # many tied values and tied splits
    y = rng.integers(0, k, n)
    y[:k] = np.arange(k)
    forest = fit_arrays(X, y, ForestParams(n_trees=1, max_features="all", bootstrap=False, seed=seed))
    oracle = naive_cart(X, y, k)
    assert _as_nested(forest.tree(0)) == _strip(oracle)
    Z = rng.normal(size=(40, d))
    expect = np.array([naive_predict(oracle, z) for z in Z])
    assert np.allclose(forest.predict_proba(Z), expect, atol=1e-12)


def test_perfect_feature_trains_to_one():
    X = np.column_stack([np.r_[np.zeros(20), np.ones(20)], np.random.default_rng(0).normal(size=40)])
    y = np.r_[["a"] * 20, ["b"] * 20]
    f = fit_arrays(X, y, ForestParams(n_trees=20, seed=1))
    assert np.mean(f.predict(X) == y) == 1.0
    assert gini_importance(fit_arrays(X[:, :1], y, ForestParams(n_trees=5)))[0] == pytest.approx(1.0)


def test_single_class_rejected():
    with pytest.raises(FitError):
        fit_arrays(np.zeros((5, 2)), ["a"] * 5, ForestParams())


@pytest.mark.parametrize("kw", [dict(n_trees=0), dict(min_samples_split=1), dict(min_samples_leaf=0),
                                dict(max_depth=0), dict(max_features="log2")])
def test_bad_params(kw):
    with pytest.raises(ParameterError):
        ForestParams(**kw)


def test_max_features_rule():
    p = ForestParams()
    assert p.resolve_max_features(29) == 5 and p.resolve_max_features(1) == 1
    with pytest.raises(ParameterError):
        ForestParams(max_features=9).resolve_max_features(8)


@pytest.fixture(scope="module")
def split6(matrix6):
    from cardiokit.ingest import stratified_split
    train, test, _, _ = stratified_split(matrix6, 0.33, seed=0)
    return train, test


def test_thread_count_does_not_matter(split6):
    train, test = split6
    a = fit_forest(train, ForestParams(seed=5), workers=1)
    b = fit_forest(train, ForestParams(seed=5), workers=8)
    assert a.to_json() == b.to_json()
    assert np.array_equal(a.predict_proba(test.values), b.predict_proba(test.values))


def test_probabilities_on_simplex(split6):
    train, _ = split6
    f = fit_forest(train, ForestParams(n_trees=30))
    Z = np.random.default_rng(0).normal(size=(200, 29)) * train.values.std(0) + train.values.mean(0)
    p = f.predict_proba(Z)
    assert np.all(p >= 0) and np.max(np.abs(p.sum(1) - 1)) <= 1e-12


def test_single_tree_probabilities_are_leaf_frequencies():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(60, 3)), rng.integers(0, 3, 60)
    f = fit_arrays(X, y, ForestParams(n_trees=1, min_samples_leaf=5, seed=2))
    tr = f.tree(0)
    for x, p in zip(X, f.predict_proba(X)):
        node = 0
        while tr["feature"][node] >= 0:
            node = tr["left"][node] if x[tr["feature"][node]] <= tr["threshold"][node] else tr["right"][node]
        leaf = np.zeros(3)
        a, b = tr["vptr"][node], tr["vptr"][node + 1]
        leaf[tr["vcls"][a:b]] = tr["vcnt"][a:b]
        assert np.allclose(p, leaf / leaf.sum(), atol=1e-15)


def test_duplicated_trees_same_probabilities():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(60, 4)), rng.integers(0, 3, 60)
    f = fit_arrays(X, y, ForestParams(n_trees=7, seed=3))
    t = [f.tree(i) for i in range(7)]
    d = f.to_json()
    # concatenate the forest with itself
    n_nodes, n_vals = len(f.feature), len(f.vcls)
    d["node_ptr"] = d["node_ptr"] + [v + n_nodes for v in d["node_ptr"][1:]]
    for key in ("feature", "threshold", "left", "right", "cover", "decrease", "vcls", "vcnt"):
        d[key] = d[key] * 2
    d["vptr"] = d["vptr"] + [v + n_vals for v in d["vptr"][1:]]
    g = Forest.from_json(d)
    assert g.n_trees == 14 and len(t) == 7
    Z = rng.normal(size=(30, 4))
    assert np.allclose(g.predict_proba(Z), f.predict_proba(Z), atol=1e-14)


def test_ties_predict_lowest_class():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    f = fit_arrays(X, ["b", "a", "b", "a"], ForestParams(n_trees=1, bootstrap=False))
    assert list(f.predict([[0.0], [1.0]])) == ["a", "a"]


def test_shape_errors():
    f = fit_arrays(np.random.default_rng(0).normal(size=(20, 3)), [0, 1] * 10, ForestParams(n_trees=2))
    with pytest.raises(ShapeError):
        f.predict(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        f.predict([[np.nan, 0, 0]])


def test_json_round_trip(tmp_path, split6):
    train, test = split6
    f = fit_forest(train, ForestParams(n_trees=10))
    f.save(tmp_path / "m.json")
    g = Forest.load(tmp_path / "m.json")
    assert g.to_json() == f.to_json()
    assert np.array_equal(g.predict_proba(test.values), f.predict_proba(test.values))


def test_metrics_all_correct():
    m = classification_metrics(["a", "b", "c"], ["a", "b", "c"])
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_constant_predictor():
    m = classification_metrics(["A", "A", "B", "B"], ["A"] * 4)
    assert m.accuracy == 0.5 and m.recall == 0.5 and m.precision == 0.25
    assert np.trace(m.confusion) / m.confusion.sum() == m.accuracy


def test_unseen_label(split6):
    train, test = split6
    f = fit_forest(train, ForestParams(n_trees=5))
    relabeled = FeatureMatrix(test.values, ["ghost"] * len(test), test.segments, test.cohorts)
    with pytest.raises(EvaluationError):
        evaluate(f, relabeled)


def test_importance_sums_to_one(split6):
    imp = gini_importance(fit_forest(split6[0], ForestParams(n_trees=20)))
    assert abs(imp.sum() - 1) <= 1e-9 and np.all(imp >= 0)


def test_noise_feature_importance_below_uniform():
    from oracles import planted_matrix
    hits = 0
    for seed in range(20):
        m, informative = planted_matrix(seed)
        imp = dict(zip(m.names, gini_importance(fit_forest(m, ForestParams(n_trees=50, seed=seed)))))
        hits += all(imp[n] < 1 / 8 for n in m.names if n not in informative)
    assert hits == 20


def test_cohort_accuracy(split6):
    train, test = split6
    assert evaluate(fit_forest(train, ForestParams(seed=0)), test).accuracy >= 0.95
