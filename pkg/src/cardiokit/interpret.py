"""Feature importance, SHAP attributions, correlations and correlation clusters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .errors import ParameterError, ShapeError
from .forest import Forest, ForestParams, _columns_for, fit_forest, gini_importance
from .matrix import FeatureMatrix


@dataclass
class ImportanceReport:
    method: str  # Gini | Permutation | Shap
    names: tuple[str, ...]
    scores: np.ndarray
    stds: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if len(self.scores) != len(self.names):
            raise ShapeError("one score per feature required")

    def ranking(self) -> list[str]:
        """Names by decreasing score; equal scores fall back to name order."""
        return [self.names[i] for i in sorted(range(len(self.names)),
                                              key=lambda i: (-self.scores[i], self.names[i]))]

    def top(self, k: int) -> list[str]:
        if not 1 <= k <= len(self.names):
            raise ParameterError(f"k={k} outside [1, {len(self.names)}]")
        return self.ranking()[:k]

    def to_rows(self) -> list[list]:
        rows = []
        for rank, name in enumerate(self.ranking(), start=1):
            i = self.names.index(name)
            std = "" if self.stds is None else repr(float(self.stds[i]))
            rows.append([rank, name, repr(float(self.scores[i])), std])
        return rows


def gini_report(forest: Forest) -> ImportanceReport:
    return ImportanceReport("Gini", forest.names, gini_importance(forest))


def _accuracy(forest: Forest, X, y) -> float:
    return float(np.mean(forest.predict(X) == y))


def permutation_importance(forest: Forest, test: FeatureMatrix, n_repeat: int = 100,
                           seed: int = 0) -> ImportanceReport:
    """Mean test-accuracy drop when one column is permuted, ``n_repeat`` times per feature."""
    if n_repeat < 1:
        raise ParameterError("n_repeat must be >= 1")
    if len(test) == 0:
        raise ShapeError("empty test set")
    X = _columns_for(forest, test)
    y = test.subjects.astype(str)
    base = _accuracy(forest, X, y)
    used = forest.used_features()
    d = forest.n_features
    drops = np.zeros((d, n_repeat))
    for j in range(d):
        if j not in used:
            continue  # predictions cannot change
        rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
        Xp = X.copy()
        for r in range(n_repeat):
            Xp[:, j] = X[rng.permutation(len(X)), j]
            drops[j, r] = base - _accuracy(forest, Xp, y)
    return ImportanceReport("Permutation", forest.names, drops.mean(axis=1), drops.std(axis=1))


def shap_values(forest: Forest, X) -> tuple[np.ndarray, np.ndarray]:
    """Path-dependent TreeSHAP.

    Returns ``(phi, base)`` with ``phi[row, class, feature]`` and
    ``base[class]``; ``base + phi.sum(-1)`` equals ``predict_proba``.
    """
    X = forest._check(X)
    n_classes = len(forest.classes)
    phi = np.zeros((len(X), n_classes, forest.n_features))
    base = np.zeros(n_classes)
    for t in range(forest.n_trees):
        tr = forest.tree(t)
        _kernels.shap_tree(X, tr["feature"], tr["threshold"], tr["left"], tr["right"],
                           tr["cover"], tr["vptr"], tr["vcls"], tr["vcnt"], n_classes, phi)
        # expected output of the tree = class frequencies at the root
        np.add.at(base, tr["vcls"], tr["vcnt"] / tr["cover"][0])
    return phi / forest.n_trees, base / forest.n_trees


def shap_global(phi) -> np.ndarray:
    """Mean over classes, then absolute value, then mean over rows."""
    phi = np.asarray(phi, dtype=float)
    return np.abs(phi.mean(axis=1)).mean(axis=0)


def shap_report(forest: Forest, test: FeatureMatrix) -> ImportanceReport:
    phi, _ = shap_values(forest, _columns_for(forest, test))
    return ImportanceReport("Shap", forest.names, shap_global(phi))


def consensus_top_k(reports: Sequence[ImportanceReport], k: int = 10) -> set[str]:
    names = set(reports[0].names)
    if any(set(r.names) != names for r in reports):
        raise ParameterError("reports cover different features")
    out = set(reports[0].top(k))
    for r in reports[1:]:
        out &= set(r.top(k))
    return out


# --- correlation -----------------------------------------------------------------

@dataclass
class CorrelationResult:
    names: tuple[str, ...]
    pearson: np.ndarray
    pearson_p: np.ndarray
    spearman: np.ndarray
    spearman_p: np.ndarray

    def pairs(self, threshold: float = 0.7, basis: str = "pearson") -> list[tuple[str, str, float]]:
        """Upper-triangle pairs with |r| strictly above ``threshold``."""
        r = self.pearson if basis == "pearson" else self.spearman
        out = []
        d = len(self.names)
        for i in range(d):
            for j in range(i + 1, d):
                if np.isfinite(r[i, j]) and abs(r[i, j]) > threshold:
                    out.append((self.names[i], self.names[j], float(r[i, j])))
        return out


def _pearson_matrix(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, d = X.shape
    Xc = X - X.mean(axis=0)
    ss = np.sqrt((Xc * Xc).sum(axis=0))
    ok = ss > 0
    r = np.full((d, d), np.nan)
    sub = Xc[:, ok] / ss[ok]
    r[np.ix_(ok, ok)] = np.clip(sub.T @ sub, -1.0, 1.0)
    np.fill_diagonal(r, np.where(ok, 1.0, np.nan))
    df = n - 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = r * np.sqrt(df / (1.0 - r * r))
    p = 2.0 * stats.t.sf(np.abs(t), df)
    p[np.abs(r) >= 1.0] = 0.0
    p[~np.isfinite(r)] = np.nan
    return r, p


def correlation_analysis(matrix: FeatureMatrix) -> CorrelationResult:
    """Pearson and Spearman (Pearson on average ranks) with two-sided t p-values.

    Constant columns give NaN entries.
    """
    X = matrix.values
    if len(X) < 3:
        raise ShapeError("correlation needs at least 3 rows")
    r, p = _pearson_matrix(X)
    ranks = np.column_stack([stats.rankdata(X[:, j]) for j in range(X.shape[1])])
    rs, ps = _pearson_matrix(ranks)
    return CorrelationResult(matrix.names, r, p, rs, ps)


@dataclass
class FeatureClusterSet:
    clusters: list[set[str]]
    threshold: float
    edges: list[tuple[str, str, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "clusters": [sorted(c) for c in self.clusters],
            "edges": [[a, b, r] for a, b, r in self.edges],
        }


def clusters_from_edges(edges: Iterable[tuple]) -> list[set[str]]:
    """Connected components of the edge graph, found by breadth-first search."""
    adj: dict[str, set[str]] = {}
    for a, b, *_ in edges:
        if a == b:
            continue
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    seen: set[str] = set()
    comps = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp, queue = {start}, [start]
        while queue:
            for nb in adj[queue.pop()]:
                if nb not in comp:
                    comp.add(nb)
                    queue.append(nb)
        seen |= comp
        comps.append(comp)
    return sorted(comps, key=lambda c: (-len(c), sorted(c)))


def cluster_features(corr: CorrelationResult, threshold: float = 0.7, basis: str = "pearson") -> FeatureClusterSet:
    edges = corr.pairs(threshold, basis)
    return FeatureClusterSet(clusters_from_edges(edges), threshold, edges)


# --- shuffle analyses -----------------------------------------------------------------

def cluster_shuffle_accuracy(forest: Forest, test: FeatureMatrix, cluster: Iterable[str],
                             seed: int = 0, n_repeat: int = 100) -> float:
    """Accuracy drop in percentage points when every cluster column is permuted independently."""
    cluster = sorted(set(cluster))
    if not cluster:
        raise ParameterError("empty cluster")
    if n_repeat < 1:
        raise ParameterError("n_repeat must be >= 1")
    unknown = set(cluster) - set(forest.names)
    if unknown:
        raise ParameterError(f"unknown feature(s) {sorted(unknown)}")
    X = _columns_for(forest, test)
    y = test.subjects.astype(str)
    base = _accuracy(forest, X, y)
    cols = [forest.names.index(c) for c in cluster]
    if not set(cols) & forest.used_features():
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([seed] + cols))
    accs = np.zeros(n_repeat)
    Xp = X.copy()
    for r in range(n_repeat):
        for j in cols:
            Xp[:, j] = X[rng.permutation(len(X)), j]
        accs[r] = _accuracy(forest, Xp, y)
    return 100.0 * (base - float(accs.mean()))


@dataclass
class ShuffleGiniResult:
    feature: str
    relative_change: dict[str, float]  # percent, per feature
    partners: dict[str, float]
    others_summary: dict[str, float]  # min, q25, median, q75, max of the remaining features
    accuracy_drop: float  # percentage points

    def to_json(self) -> dict:
        return {"feature": self.feature, "relative_change": self.relative_change,
                "partners": self.partners, "others_summary": self.others_summary,
                "accuracy_drop": self.accuracy_drop}


def representative_shuffle_gini(train: FeatureMatrix, test: FeatureMatrix, feature: str,
                                params: ForestParams = ForestParams(), seed: int = 0,
                                partners: Iterable[str] = (), workers: int = 1) -> ShuffleGiniResult:
    """Retrain with one training column shuffled and compare Gini importances."""
    if feature not in train.names:
        raise ParameterError(f"unknown feature {feature!r}")
    ref = fit_forest(train, params, workers)
    j = train.names.index(feature)
    rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
    values = train.values.copy()
    values[:, j] = values[rng.permutation(len(values)), j]
    shuffled = fit_forest(train.with_values(values), params, workers)
    g0, g1 = gini_importance(ref), gini_importance(shuffled)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(g0 > 0, 100.0 * (g1 - g0) / g0, np.nan)
    change = {n: float(rel[i]) for i, n in enumerate(train.names)}
    partners = [p for p in partners if p != feature]
    rest = np.array([change[n] for n in train.names if n != feature and n not in partners])
    rest = rest[np.isfinite(rest)]
    if len(rest):
        q = np.percentile(rest, [0, 25, 50, 75, 100])
        summary = dict(zip(("min", "q25", "median", "q75", "max"), map(float, q)))
    else:
        summary = {}
    X = _columns_for(ref, test)
    y = test.subjects.astype(str)
    drop = 100.0 * (_accuracy(ref, X, y) - _accuracy(shuffled, X, y))
    return ShuffleGiniResult(feature, change, {p: change[p] for p in partners}, summary, drop)
