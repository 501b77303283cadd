import inspect

import numpy as np
import pytest
from scipy import stats

from cardiokit.errors import ParameterError, ShapeError
from cardiokit.forest import ForestParams, fit_arrays, fit_forest
from cardiokit.interpret import (CorrelationResult, ImportanceReport, cluster_features, cluster_shuffle_accuracy,
                                 clusters_from_edges, consensus_top_k, correlation_analysis, gini_report,
                                 permutation_importance, representative_shuffle_gini, shap_global, shap_report,
                                 shap_values)
from cardiokit.matrix import FeatureMatrix
from oracles import brute_shap, union_find_clusters

# the 31 Pearson pairs above 0.7 of the published correlation table
PUBLISHED_PAIRS = [
    ("QX_int", "SX_int"), ("RQ_amp", "RT_amp"), ("QR_slope", "RQ_amp"), ("QX_int", "BX_int"),
    ("RS_amp", "RS_slope"), ("TT1_amp", "TT2_amp"), ("SX_int", "BX_int"), ("CX_amp", "CB_amp"),
    ("QT_int", "ST_int"), ("QR_slope", "RT_amp"), ("CB_slope", "CB_amp"), ("TT1_slope", "TT1_amp"),
    ("QB_int", "SB_int"), ("TT2_slope", "TT2_amp"), ("QRS_int", "ECGQRScrest"), ("RS_amp", "RQ_amp"),
    ("CX_slope", "CX_amp"), ("RS_slope", "RQ_amp"), ("RT_amp", "RS_amp"), ("QX_int", "TX_int"),
    ("SX_int", "TX_int"), ("BT_int", "QT_int"), ("TT1_slope", "TT2_slope"), ("CB_slope", "CX_amp"),
    ("QB_int", "RC_int"), ("SB_int", "RC_int"), ("QR_slope", "RS_amp"), ("BT_int", "ST_int"),
    ("BX_int", "TX_int"), ("CX_slope", "CB_amp"), ("RS_slope", "RT_amp"),
]
PUBLISHED_CLUSTERS = [
    {"RQ_amp", "RT_amp", "QR_slope", "RS_amp", "RS_slope"}, {"QX_int", "SX_int", "BX_int", "TX_int"},
    {"TT1_amp", "TT2_amp", "TT1_slope", "TT2_slope"}, {"CX_amp", "CB_amp", "CB_slope", "CX_slope"},
    {"QT_int", "ST_int", "BT_int"}, {"QB_int", "SB_int", "RC_int"}, {"QRS_int", "ECGQRScrest"},
]


def _random_forest(seed, d=None, n_trees=3):
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(2, 9))
    n = int(rng.integers(20, 201))
    k = int(rng.integers(2, 4))
    X = rng.normal(size=(n, d)).round(1)
    y = rng.integers(0, k, n)
    y[:k] = np.arange(k)
    f = fit_arrays(X, y, ForestParams(n_trees=n_trees, seed=seed, max_depth=int(rng.integers(2, 7))))
    return f, X


@pytest.mark.parametrize("seed", range(6))
def test_shap_matches_brute_force(seed):
    f, X = _random_forest(seed)
    phi, base = shap_values(f, X[:4])
    for r in range(4):
        assert np.max(np.abs(brute_shap(f, X[r]) - phi[r])) <= 1e-9


def test_local_accuracy():
    f, X = _random_forest(42, d=6, n_trees=10)
    phi, base = shap_values(f, X)
    assert np.max(np.abs(base + phi.sum(-1) - f.predict_proba(X))) <= 1e-9


def test_stump_attributes_only_its_feature():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 4))
    f = fit_arrays(X, (X[:, 2] > 0).astype(int), ForestParams(n_trees=1, max_depth=1, max_features="all"))
    phi, _ = shap_values(f, X)
    assert np.all(phi[:, :, [0, 1, 3]] == 0) and np.any(phi[:, :, 2] != 0)


def test_shap_shape_error():
    f, X = _random_forest(1, d=3)
    with pytest.raises(ShapeError):
        shap_values(f, X[:, :2])


def test_shap_global_reduction_order():
    phi = np.array([[[1.0, -2.0], [-1.0, 4.0]]])  # one row, two classes
    assert np.allclose(shap_global(phi), [0.0, 1.0])
    assert np.allclose(shap_global(np.array([[[0.5, -3.0]]])), [0.5, 3.0])
    phi = np.random.default_rng(0).normal(size=(7, 3, 5))
    expect = [np.mean([abs(np.mean(phi[r, :, j])) for r in range(7)]) for j in range(5)]
    assert np.allclose(shap_global(phi), expect)


def _report(scores, names=None):
    names = names or tuple(f"f{i}" for i in range(len(scores)))
    return ImportanceReport("Gini", names, scores)


def test_consensus_identical_rankings():
    r = _report(np.arange(12.0))
    assert len(consensus_top_k([r, r, r], 10)) == 10


def test_consensus_disjoint():
    a, b = _report(np.r_[np.ones(3), np.zeros(3)]), _report(np.r_[np.zeros(3), np.ones(3)])
    assert consensus_top_k([a, b, a], 3) == set()


def test_consensus_ties_by_name():
    r = _report(np.ones(4), ("d", "b", "a", "c"))
    assert r.top(2) == ["a", "b"]
    with pytest.raises(ParameterError):
        r.top(5)


def test_unused_feature_permutation_importance_is_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 3))
    y = (X[:, 0] > 0).astype(str)
    f = fit_arrays(X, y, ForestParams(n_trees=5, max_features="all", max_depth=1), ("a", "b", "c"))
    m = FeatureMatrix(X, y, ["Baseline"] * 60, np.zeros(60, int), ("a", "b", "c"))
    rep = permutation_importance(f, m, n_repeat=20)
    assert rep.scores[1] == 0.0 and rep.scores[2] == 0.0 and np.all(rep.stds >= 0)


def test_permutation_of_perfect_feature_drops_to_chance():
    n = 400
    x = np.r_[np.zeros(n // 2), np.ones(n // 2)]
    y = np.r_[["a"] * (n // 2), ["b"] * (n // 2)]
    f = fit_arrays(x[:, None], y, ForestParams(n_trees=5), ("x",))
    m = FeatureMatrix(x[:, None], y, ["Baseline"] * n, np.zeros(n, int), ("x",))
    rep = permutation_importance(f, m, n_repeat=100, seed=1)
    assert rep.scores[0] == pytest.approx(1.0 - 0.5, abs=0.02)


def test_permutation_default_repeats():
    assert inspect.signature(permutation_importance).parameters["n_repeat"].default == 100
    f, X = _random_forest(0, d=3)
    m = FeatureMatrix(X, f.predict(X), ["Baseline"] * len(X), np.zeros(len(X), int), f.names)
    with pytest.raises(ParameterError):
        permutation_importance(f, m, n_repeat=0)


def test_reports_on_cohort(matrix6):
    f = fit_forest(matrix6, ForestParams(n_trees=20))
    for rep in (gini_report(f), shap_report(f, matrix6)):
        assert sorted(rep.ranking()) == sorted(matrix6.names)


def test_linear_correlation():
    x = np.arange(10.0)
    m = FeatureMatrix(np.column_stack([x, 2 * x]), ["s"] * 10, ["Baseline"] * 10, np.zeros(10, int), ("x", "y"))
    c = correlation_analysis(m)
    assert c.pearson[0, 1] == pytest.approx(1.0) and c.spearman[0, 1] == pytest.approx(1.0)


def test_five_point_sample_matches_direct_formula():
    x = np.array([1.0, 2.0, 4.0, 3.5, 7.0])
    y = np.array([2.0, 1.0, 5.0, 4.0, 6.5])
    m = FeatureMatrix(np.column_stack([x, y]), ["s"] * 5, ["Baseline"] * 5, np.zeros(5, int), ("x", "y"))
    c = correlation_analysis(m)
    xc, yc = x - x.mean(), y - y.mean()
    r = np.sum(xc * yc) / np.sqrt(np.sum(xc ** 2) * np.sum(yc ** 2))
    assert c.pearson[0, 1] == pytest.approx(r, abs=1e-12)
    t = r * np.sqrt(3 / (1 - r * r))
    assert c.pearson_p[0, 1] == pytest.approx(2 * stats.t.sf(abs(t), 3), abs=1e-12)
    ref = stats.pearsonr(x, y)
    assert c.pearson_p[0, 1] == pytest.approx(ref.pvalue, abs=1e-12)


def test_spearman_is_pearson_of_ranks(matrix6):
    c = correlation_analysis(matrix6)
    ranks = np.column_stack([stats.rankdata(matrix6.values[:, j]) for j in range(29)])
    assert np.allclose(c.spearman, np.corrcoef(ranks.T), atol=1e-12)
    assert np.allclose(c.spearman, c.spearman.T) and np.allclose(np.diag(c.spearman), 1)


def test_constant_column_is_missing():
    m = FeatureMatrix(np.column_stack([np.arange(5.0), np.ones(5)]), ["s"] * 5, ["Baseline"] * 5,
                      np.zeros(5, int), ("x", "c"))
    c = correlation_analysis(m)
    assert np.isnan(c.pearson[0, 1]) and np.isnan(c.spearman[1, 1])
    assert c.pairs(0.7) == []


def _corr_from_edges(edges, names):
    r = np.eye(len(names))
    for a, b in edges:
        i, j = names.index(a), names.index(b)
        r[i, j] = r[j, i] = 0.9
    return CorrelationResult(tuple(names), r, r, r, r)


def test_published_pairs_give_seven_clusters():
    names = sorted({n for e in PUBLISHED_PAIRS for n in e})
    got = cluster_features(_corr_from_edges(PUBLISHED_PAIRS, names)).clusters
    assert len(got) == 7
    assert sorted(map(frozenset, got), key=sorted) == sorted(map(frozenset, PUBLISHED_CLUSTERS), key=sorted)


def test_threshold_is_strict():
    r = np.array([[1.0, 0.7], [0.7, 1.0]])
    c = CorrelationResult(("a", "b"), r, r, r, r)
    assert cluster_features(c, 0.7).clusters == []
    r = np.array([[1.0, -0.71], [-0.71, 1.0]])
    assert cluster_features(CorrelationResult(("a", "b"), r, r, r, r), 0.7).clusters == [{"a", "b"}]


def test_clusters_match_union_find_in_any_order():
    rng = np.random.default_rng(0)
    names = [f"v{i}" for i in range(15)]
    for _ in range(20):
        edges = [tuple(rng.choice(names, 2, replace=False)) for _ in range(int(rng.integers(0, 12)))]
        expect = union_find_clusters(edges)
        for perm in (edges, edges[::-1]):
            got = sorted((frozenset(c) for c in clusters_from_edges(perm)), key=sorted)
            assert got == expect


@pytest.fixture(scope="module")
def split6(matrix6):
    from cardiokit.ingest import stratified_split
    return stratified_split(matrix6, 0.33, seed=0)[:2]


def test_cluster_shuffle_unused_cluster():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.r_[np.zeros(30), np.ones(30)], rng.normal(size=(60, 2))])
    y = np.r_[["a"] * 30, ["b"] * 30]
    names = ("sep", "n1", "n2")
    f = fit_arrays(X, y, ForestParams(n_trees=5, max_features="all"), names)
    assert f.used_features() == {0}
    m = FeatureMatrix(X, y, ["Baseline"] * 60, np.zeros(60, int), names)
    assert cluster_shuffle_accuracy(f, m, ["n1", "n2"], seed=0, n_repeat=5) == 0.0
    assert cluster_shuffle_accuracy(f, m, ["sep", "n1"], seed=0, n_repeat=20) > 30
    with pytest.raises(ParameterError):
        cluster_shuffle_accuracy(f, m, [], seed=0)


def test_cluster_shuffle_drop_is_positive(split6):
    train, test = split6
    f = fit_forest(train, ForestParams(n_trees=30))
    drop = cluster_shuffle_accuracy(f, test, list(train.names), seed=0, n_repeat=10)
    assert drop > 50


def test_shuffling_a_duplicate_moves_importance():
    rng = np.random.default_rng(0)
    n = 200
    y = rng.integers(0, 4, n)
    sig = y + rng.normal(scale=0.4, size=n)
    X = np.column_stack([sig, sig.copy(), rng.normal(size=(n, 3))])
    m = FeatureMatrix(X, y.astype(str), ["Baseline"] * n, np.zeros(n, int), ("a", "a2", "n1", "n2", "n3"))
    res = representative_shuffle_gini(m, m, "a", ForestParams(n_trees=50, seed=0), seed=0, partners=["a2"])
    assert res.relative_change["a"] < 0
    assert res.partners["a2"] > 0
    assert set(res.others_summary) == {"min", "q25", "median", "q75", "max"}
