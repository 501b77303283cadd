"""Random-forest identification: CART trees with Gini splits and bootstrap bagging."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import EvaluationError, FitError, ParameterError, ShapeError
from .matrix import FeatureMatrix

MODEL_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    """Defaults follow the usual reference implementation."""

    n_trees: int = 100
    max_features: int | str | None = "sqrt"
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ParameterError("n_trees must be >= 1")
        if self.min_samples_split < 2 or self.min_samples_leaf < 1:
            raise ParameterError("min_samples_split must be >= 2 and min_samples_leaf >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ParameterError("max_depth must be >= 1 or None")
        if self.seed < 0:
            raise ParameterError("seed must be non-negative")
        if isinstance(self.max_features, str) and self.max_features not in ("sqrt", "all"):
            raise ParameterError(f"unknown max_features rule {self.max_features!r}")

    def resolve_max_features(self, d: int) -> int:
        mf = self.max_features
        if mf is None or mf == "all":
            return d
        if mf == "sqrt":
            return max(1, int(math.isqrt(d)))
        if not 1 <= int(mf) <= d:
            raise ParameterError(f"max_features={mf} outside [1, {d}]")
        return int(mf)

    def replace(self, **kw) -> "ForestParams":
        return ForestParams(**{**asdict(self), **kw})


def tree_seeds(seed: int, tree_index: int, n: int, bootstrap: bool):
    """Bootstrap indices and split-sampling seed for one tree.

    Both come from a stream keyed on ``(seed, tree_index)``, so trees can be
    grown in any order or thread.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, tree_index]))
    idx = rng.integers(0, n, n) if bootstrap else np.arange(n)
    return idx.astype(np.int64), int(rng.integers(0, 2**31 - 1))


@dataclass
class Forest:
    classes: np.ndarray
    names: tuple[str, ...]
    params: ForestParams
    node_ptr: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cover: np.ndarray
    decrease: np.ndarray
    vptr: np.ndarray
    vcls: np.ndarray
    vcnt: np.ndarray
    _trees: list = field(default=None, repr=False)

    @property
    def n_trees(self) -> int:
        return len(self.node_ptr) - 1

    @property
    def n_features(self) -> int:
        return len(self.names)

    def tree(self, t: int) -> dict:
        """Arrays of one tree with node-local indices."""
        a, b = int(self.node_ptr[t]), int(self.node_ptr[t + 1])
        vp = self.vptr[a:b + 1]
        return {
            "feature": self.feature[a:b], "threshold": self.threshold[a:b],
            "left": self.left[a:b], "right": self.right[a:b],
            "cover": self.cover[a:b], "decrease": self.decrease[a:b],
            "vptr": vp - vp[0], "vcls": self.vcls[vp[0]:vp[-1]], "vcnt": self.vcnt[vp[0]:vp[-1]],
        }

    def used_features(self) -> set[int]:
        return set(int(f) for f in np.unique(self.feature[self.feature >= 0]))

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ShapeError("inputs must be finite")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        return _kernels.predict_proba(
            X, self.node_ptr, self.feature, self.threshold, self.left, self.right,
            self.cover, self.vptr, self.vcls, self.vcnt, len(self.classes))

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lowest class id on ties
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]

    def to_json(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "classes": [str(c) for c in self.classes],
            "names": list(self.names),
            "params": asdict(self.params),
            "node_ptr": self.node_ptr.tolist(), "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(), "left": self.left.tolist(),
            "right": self.right.tolist(), "cover": self.cover.tolist(),
            "decrease": self.decrease.tolist(), "vptr": self.vptr.tolist(),
            "vcls": self.vcls.tolist(), "vcnt": self.vcnt.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Forest":
        if d.get("version") != MODEL_VERSION:
            raise FitError(f"unsupported model version {d.get('version')!r}")
        ints = lambda k: np.asarray(d[k], dtype=np.int64)  # noqa: E731
        floats = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            np.asarray(d["classes"], dtype=object), tuple(d["names"]), ForestParams(**d["params"]),
            ints("node_ptr"), ints("feature"), floats("threshold"), ints("left"), ints("right"),
            floats("cover"), floats("decrease"), ints("vptr"), ints("vcls"), floats("vcnt"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_json(json.loads(Path(path).read_text()))


def _assemble(trees, classes, names, params) -> Forest:
    sizes = [len(t[0]) for t in trees]
    node_ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    vptr = [np.zeros(1, dtype=np.int64)]
    off = 0
    for t in trees:
        vptr.append(t[6][1:] + off)
        off += int(t[6][-1])
    cat = lambda i: np.concatenate([t[i] for t in trees])  # noqa: E731
    return Forest(np.asarray(classes, dtype=object), tuple(names), params, node_ptr,
                  cat(0), cat(1), cat(2), cat(3), cat(4), cat(5),
                  np.concatenate(vptr), cat(7), cat(8))


def fit_arrays(X, labels, params: ForestParams, names=None, workers: int = 1) -> Forest:
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or len(X) != len(labels):
        raise ShapeError("X must be 2-D with one label per row")
    if not np.all(np.isfinite(X)):
        raise FitError("training data must be finite")
    classes, y = np.unique(np.asarray(labels).astype(str), return_inverse=True)
    if len(classes) < 2:
        raise FitError("need at least 2 classes to fit a forest")
    n, d = X.shape
    names = tuple(names) if names is not None else tuple(f"f{i}" for i in range(d))
    mf = params.resolve_max_features(d)
    depth = -1 if params.max_depth is None else params.max_depth
    y = y.astype(np.int64)

    def grow(t):
        idx, s = tree_seeds(params.seed, t, n, params.bootstrap)
        return _kernels.build_tree(X, y, idx, len(classes), mf, params.min_samples_split,
                                   params.min_samples_leaf, depth, s)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            trees = list(ex.map(grow, range(params.n_trees)))
    else:
        trees = [grow(t) for t in range(params.n_trees)]
    return _assemble(trees, classes, names, params)


def fit_forest(train: FeatureMatrix, params: ForestParams = ForestParams(), workers: int = 1) -> Forest:
    """Forest identifying ``train.subjects`` from the feature columns."""
    return fit_arrays(train.values, train.subjects, params, train.names, workers)


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    labels: list[str]
    confusion: np.ndarray
    per_class: dict[str, dict[str, float]]

    def summary(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def classification_metrics(y_true, y_pred) -> Metrics:
    """Accuracy plus macro precision/recall/F1 over every label seen in either array."""
    y_true = np.asarray(y_true).astype(str)
    y_pred = np.asarray(y_pred).astype(str)
    if len(y_true) == 0 or len(y_true) != len(y_pred):
        raise EvaluationError("need equally long, non-empty label arrays")
    labels = sorted(set(y_true) | set(y_pred))
    pos = {c: i for i, c in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    np.add.at(cm, ([pos[c] for c in y_true], [pos[c] for c in y_pred]), 1)
    tp = np.diag(cm).astype(float)
    pred_n = cm.sum(axis=0)
    true_n = cm.sum(axis=1)
    prec = np.divide(tp, pred_n, out=np.zeros_like(tp), where=pred_n > 0)
    rec = np.divide(tp, true_n, out=np.zeros_like(tp), where=true_n > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    per_class = {c: {"precision": float(prec[i]), "recall": float(rec[i]), "f1": float(f1[i]),
                     "support": int(true_n[i])} for i, c in enumerate(labels)}
    return Metrics(float(tp.sum() / cm.sum()), float(prec.mean()), float(rec.mean()),
                   float(f1.mean()), labels, cm, per_class)


def evaluate(forest: Forest, test: FeatureMatrix) -> Metrics:
    if len(test) == 0:
        raise EvaluationError("empty test set")
    unseen = set(test.subjects.astype(str)) - set(forest.classes)
    if unseen:
        raise EvaluationError(f"labels not seen in training: {sorted(unseen)}")
    return classification_metrics(test.subjects, forest.predict(_columns_for(forest, test)))


def _columns_for(forest: Forest, m: FeatureMatrix) -> np.ndarray:
    if tuple(m.names) == forest.names:
        return m.values
    missing = set(forest.names) - set(m.names)
    if missing:
        raise ShapeError(f"matrix lacks model features {sorted(missing)}")
    return m.values[:, [m.names.index(n) for n in forest.names]]


def gini_importance(forest: Forest) -> np.ndarray:
    """Mean decrease in impurity.

    Each tree's decreases are normalized to sum 1 before averaging, and the
    average is normalized again.
    """
    imp = np.zeros(forest.n_features)
    for t in range(forest.n_trees):
        a, b = forest.node_ptr[t], forest.node_ptr[t + 1]
        f = forest.feature[a:b]
        inner = f >= 0
        per = np.zeros(forest.n_features)
        np.add.at(per, f[inner], forest.decrease[a:b][inner])
        s = per.sum()
        if s > 0:
            imp += per / s
    total = imp.sum()
    return imp / total if total > 0 else imp
