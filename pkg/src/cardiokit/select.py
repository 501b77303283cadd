"""Feature-subset search: RFECV, a bit-mask genetic algorithm, and their intersection."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, SplitError
from .forest import ForestParams, classification_metrics, fit_forest, gini_importance
from .matrix import FeatureMatrix

log = logging.getLogger(__name__)


def stratified_kfold(labels, k: int, seed: int = 0) -> list[np.ndarray]:
    """Test-row indices of ``k`` folds; each class is shuffled and dealt round-robin.

    The dealing offset rotates from class to class so fold sizes stay within one.
    """
    labels = np.asarray(labels).astype(str)
    if k < 2:
        raise ParameterError("need at least 2 folds")
    rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in sorted(set(labels)):
        rows = np.flatnonzero(labels == cls)
        if len(rows) < k:
            raise SplitError(f"class {cls!r} has {len(rows)} rows, fewer than {k} folds")
        for pos, row in enumerate(rng.permutation(rows)):
            folds[(offset + pos) % k].append(int(row))
        offset = (offset + len(rows)) % k
    return [np.array(sorted(f), dtype=int) for f in folds]


def cross_validate(matrix: FeatureMatrix, params: ForestParams, k: int = 5, seed: int = 0,
                   workers: int = 1) -> tuple[float, float]:
    """Mean accuracy and mean macro F1 over stratified folds."""
    folds = stratified_kfold(matrix.subjects, k, seed)
    all_rows = np.arange(len(matrix))
    accs, f1s = [], []
    for test_rows in folds:
        train_rows = np.setdiff1d(all_rows, test_rows)
        forest = fit_forest(matrix.take(train_rows), params, workers)
        test = matrix.take(test_rows)
        m = classification_metrics(test.subjects, forest.predict(test.values))
        accs.append(m.accuracy)
        f1s.append(m.f1)
    return float(np.mean(accs)), float(np.mean(f1s))


@dataclass
class SelectionResult:
    method: str  # RFECV | GA | Intersection
    selected: list[str]
    universe: list[str]
    curve: list = field(default_factory=list)
    score: float | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)
    warning: str | None = None

    @property
    def mask(self) -> list[int]:
        chosen = set(self.selected)
        return [int(n in chosen) for n in self.universe]

    def to_json(self) -> dict:
        return {"method": self.method, "selected": self.selected, "universe": self.universe,
                "mask": self.mask, "curve": self.curve, "score": self.score, "seed": self.seed,
                "params": self.params, "warning": self.warning}

    @classmethod
    def from_json(cls, d: dict) -> "SelectionResult":
        return cls(d["method"], list(d["selected"]), list(d["universe"]), d.get("curve", []),
                   d.get("score"), d.get("seed", 0), d.get("params", {}), d.get("warning"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SelectionResult":
        return cls.from_json(json.loads(Path(path).read_text()))


def rfecv(train: FeatureMatrix, params: ForestParams = ForestParams(), cv_folds: int = 5,
          step: int = 1, workers: int = 1) -> SelectionResult:
    """Recursive elimination by Gini importance, scored by stratified k-fold accuracy.

    The best-scoring subset wins; ties go to the smaller subset.
    """
    if step < 1:
        raise ParameterError("step must be >= 1")
    current = list(train.names)
    curve = []  # (size, cv accuracy, features)
    while True:
        sub = train.select(current)
        acc, _ = cross_validate(sub, params, cv_folds, params.seed, workers)
        curve.append((len(current), acc, list(current)))
        log.info("rfecv: %d features, cv accuracy %.4f", len(current), acc)
        if len(current) == 1:
            break
        imp = gini_importance(fit_forest(sub, params, workers))
        n_drop = min(step, len(current) - 1)
        # lowest importance first; among equals the later column goes first
        order = sorted(range(len(current)), key=lambda i: (imp[i], -i))
        drop = {current[i] for i in order[:n_drop]}
        current = [n for n in current if n not in drop]
    best = max(curve, key=lambda c: (c[1], -c[0]))
    return SelectionResult("RFECV", best[2], list(train.names),
                           [[size, acc] for size, acc, _ in curve], best[1], params.seed,
                           {"cv_folds": cv_folds, "step": step, "forest": asdict(params)})


@dataclass(frozen=True)
class GaParams:
    population: int = 50
    generations: int = 50
    crossover_prob: float = 0.5
    mutation_prob: float = 0.1
    tournament_size: int = 3
    per_gene_flip: float = 0.05
    elitism: int = 1
    cv_folds: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("crossover_prob", "mutation_prob", "per_gene_flip"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.population < 2 or self.generations < 0:
            raise ParameterError("population must be >= 2 and generations >= 0")
        if self.tournament_size < 1 or not 0 <= self.elitism < self.population:
            raise ParameterError("bad tournament size or elitism")


def _two_point(a: np.ndarray, b: np.ndarray, rng) -> None:
    d = len(a)
    p1 = int(rng.integers(1, d + 1))
    p2 = int(rng.integers(1, d))
    if p2 >= p1:
        p2 += 1
    else:
        p1, p2 = p2, p1
    tmp = a[p1:p2].copy()
    a[p1:p2] = b[p1:p2]
    b[p1:p2] = tmp


def ga_select(train: FeatureMatrix, forest_params: ForestParams = ForestParams(),
              ga: GaParams = GaParams(), workers: int = 1) -> SelectionResult:
    """Genetic search over feature masks with cross-validated forest accuracy as fitness.

    Fitness depends only on the mask, so it is cached; ``curve`` holds the best
    fitness of each generation.
    """
    names = list(train.names)
    d = len(names)
    if d < 2:
        raise ParameterError("GA selection needs at least 2 features")
    rng = np.random.default_rng(np.random.SeedSequence([ga.seed, 0x6A]))
    cache: dict[bytes, float] = {}

    def fitness(mask: np.ndarray) -> float:
        sub = train.select([n for n, b in zip(names, mask) if b])
        return cross_validate(sub, forest_params, ga.cv_folds, ga.seed)[0]

    def evaluate(pop) -> np.ndarray:
        todo = []
        for ind in pop:
            key = ind.tobytes()
            if key not in cache and key not in todo:
                todo.append(key)
        masks = [np.frombuffer(k, dtype=np.int8) for k in todo]
        if workers > 1 and len(masks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                scores = list(ex.map(fitness, masks))
        else:
            scores = [fitness(m) for m in masks]
        cache.update(zip(todo, scores))
        return np.array([cache[ind.tobytes()] for ind in pop])

    def repair(ind):
        if not ind.any():
            ind[int(rng.integers(0, d))] = 1

    pop = [rng.integers(0, 2, d).astype(np.int8) for _ in range(ga.population)]
    for ind in pop:
        repair(ind)
    fit = evaluate(pop)

    def best_of(pop, fit):
        # highest fitness, then fewest features, then earliest
        i = min(range(len(pop)), key=lambda j: (-fit[j], int(pop[j].sum()), j))
        return pop[i].copy(), float(fit[i])

    best_mask, best_fit = best_of(pop, fit)
    history = [best_fit]
    for _ in range(ga.generations):
        order = sorted(range(len(pop)), key=lambda j: (-fit[j], int(pop[j].sum()), j))
        elite = [pop[j].copy() for j in order[:ga.elitism]]
        offspring = []
        for _ in range(ga.population - ga.elitism):
            contenders = rng.integers(0, len(pop), ga.tournament_size)
            win = max(contenders, key=lambda j: fit[j])
            offspring.append(pop[win].copy())
        for i in range(0, len(offspring) - 1, 2):
            if rng.random() < ga.crossover_prob:
                _two_point(offspring[i], offspring[i + 1], rng)
        for ind in offspring:
            if rng.random() < ga.mutation_prob:
                flips = rng.random(d) < ga.per_gene_flip
                ind[flips] ^= 1
            repair(ind)
        pop = elite + offspring
        fit = evaluate(pop)
        gen_mask, gen_fit = best_of(pop, fit)
        if gen_fit > best_fit or (gen_fit == best_fit and gen_mask.sum() < best_mask.sum()):
            best_mask, best_fit = gen_mask, gen_fit
        history.append(gen_fit)
    selected = [n for n, b in zip(names, best_mask) if b]
    return SelectionResult("GA", selected, names, history, best_fit, ga.seed,
                           {"ga": asdict(ga), "forest": asdict(forest_params),
                            "evaluations": len(cache)})


def intersect_subsets(a: SelectionResult, b: SelectionResult) -> SelectionResult:
    if a.universe != b.universe:
        raise ParameterError("subsets come from different feature universes")
    other = set(b.selected)
    common = [n for n in a.selected if n in other]
    warning = None
    if not common:
        warning = "empty intersection"
        log.warning("%s and %s subsets do not intersect", a.method, b.method)
    return SelectionResult("Intersection", common, list(a.universe), [], None, a.seed,
                           {"from": [a.method, b.method]}, warning)
