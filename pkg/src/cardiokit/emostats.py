"""Baseline-versus-anger hypothesis tests and cross-emotion generalization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import StatTestError
from .forest import ForestParams, evaluate, fit_forest
from .matrix import FeatureMatrix
from .select import cross_validate

ALPHA = 0.05

# Royston (1995) polynomial coefficients
_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_G = (-2.273, 0.459)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)


def _poly(c, x):
    out = 0.0
    for coef in reversed(c):
        out = out * x + coef
    return out


def shapiro_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights for the ordered sample, unit norm."""
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    half = n // 2
    m = special.ndtri((np.arange(1, half + 1) - 0.375) / (n + 0.25))
    summ2 = 2.0 * float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a1 = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a2 = _poly(_C2, rsn) - m[1] / ssumm2
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1 ** 2 - 2 * a2 ** 2))
        a = -m / fac
        a[0], a[1] = a1, a2
    else:
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1 ** 2))
        a = -m / fac
        a[0] = a1
    w = np.zeros(n)
    w[:half] = -a
    w[n - half:] = a[::-1]
    return w


def shapiro_wilk(sample) -> tuple[float, float]:
    """W statistic and p-value by Royston's approximation, 3 <= n <= 5000."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    if not 3 <= n <= 5000:
        raise StatTestError(f"Shapiro-Wilk needs 3..5000 values, got {n}")
    rng = x[-1] - x[0]
    if not rng > 0:
        raise StatTestError("Shapiro-Wilk undefined for a constant sample")
    a = shapiro_coefficients(n)
    xs = (x - x.mean()) / rng
    ac = a - a.mean()
    ssa, ssx, sax = float(ac @ ac), float(xs @ xs), float(ac @ xs)
    root = math.sqrt(ssa * ssx)
    w1 = (root - sax) * (root + sax) / (ssa * ssx)  # 1 - W, kept for precision near 1
    w = 1.0 - w1
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.pi / 3.0)
        return w, min(1.0, max(0.0, p))
    y = math.log(w1)
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mu = _poly(_C5, ln)
        sigma = math.exp(_poly(_C6, ln))
    return w, float(stats.norm.sf((y - mu) / sigma))


def _pooled_sd(a, b) -> float:
    na, nb = len(a), len(b)
    return math.sqrt(((na - 1) * np.var(a, ddof=1) + (nb - 1) * np.var(b, ddof=1)) / (na + nb - 2))


def ttest_ind(a, b) -> tuple[float, float]:
    """Student's two-sample t-test with pooled variance, two-sided."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise StatTestError("t-test needs at least 2 values per group")
    sp = _pooled_sd(a, b)
    if sp == 0:
        raise StatTestError("t-test undefined: pooled variance is zero")
    t = (a.mean() - b.mean()) / (sp * math.sqrt(1 / len(a) + 1 / len(b)))
    df = len(a) + len(b) - 2
    return float(t), float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


def mann_whitney_u(a, b) -> tuple[float, float]:
    """U of sample ``a`` and a two-sided p from the tie- and continuity-corrected normal approximation."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = len(a), len(b)
    if na < 1 or nb < 1:
        raise StatTestError("Mann-Whitney needs non-empty samples")
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    n = na + nb
    _, t = np.unique(ranks, return_counts=True)
    tie = float(np.sum(t ** 3 - t))
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return u, 1.0
    dev = abs(u - na * nb / 2.0) - 0.5
    if dev <= 0:
        return u, 1.0
    return u, float(min(1.0, 2.0 * stats.norm.sf(dev / math.sqrt(var))))


def cohens_d(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sp = _pooled_sd(a, b)
    if not sp > 0:
        raise StatTestError("Cohen's d undefined: pooled sd is zero")
    return float((a.mean() - b.mean()) / sp)


def cliffs_delta(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise StatTestError("Cliff's delta needs non-empty samples")
    # for each a_i: count of b below and above it
    below = np.searchsorted(b, a, side="left")
    above = len(b) - np.searchsorted(b, a, side="right")
    return float((below.sum() - above.sum()) / (len(a) * len(b)))


def bonferroni(p, m: int | None = None) -> list[float]:
    p = [float(v) for v in p]
    m = len(p) if m is None else m
    return [min(1.0, v * m) for v in p]


def effect_label(kind: str, value: float) -> str:
    """Conventional magnitude label; informational only."""
    v = abs(value)
    cuts = (0.2, 0.5, 0.8) if kind == "CohensD" else (0.147, 0.33, 0.474)
    for cut, name in zip(cuts, ("negligible", "small", "medium")):
        if v < cut:
            return name
    return "large"


@dataclass
class FeatureTestResult:
    feature: str
    normality: tuple[tuple[float, float], tuple[float, float]]
    test: str  # TTest | MannWhitney
    statistic: float
    p_raw: float
    p_adj: float
    effect_kind: str
    effect: float
    significant: bool

    def row(self) -> list:
        (wa, pa), (wb, pb) = self.normality
        return [self.feature, repr(wa), repr(pa), repr(wb), repr(pb), self.test,
                repr(self.statistic), repr(self.p_raw), repr(self.p_adj), self.effect_kind,
                repr(self.effect), effect_label(self.effect_kind, self.effect), self.significant]


TEST_COLUMNS = ["feature", "W_baseline", "p_norm_baseline", "W_anger", "p_norm_anger", "test",
                "statistic", "p_raw", "p_bonferroni", "effect_kind", "effect", "effect_label",
                "significant"]


def choose_test(p_norm_a: float, p_norm_b: float, alpha: float = ALPHA) -> str:
    return "TTest" if p_norm_a >= alpha and p_norm_b >= alpha else "MannWhitney"


def emotion_feature_tests(matrix: FeatureMatrix, groups=("Baseline", "Anger"),
                          m: int | None = None, alpha: float = ALPHA) -> list[FeatureTestResult]:
    """Per-feature test of group ``groups[0]`` against ``groups[1]``.

    Both groups normal (Shapiro-Wilk p >= alpha) selects the t-test with
    Cohen's d, otherwise Mann-Whitney with Cliff's delta. Raw p-values are
    Bonferroni-adjusted over all features.
    """
    ga = matrix.segments == groups[0]
    gb = matrix.segments == groups[1]
    if not ga.any() or not gb.any():
        raise StatTestError(f"need rows from both {groups[0]} and {groups[1]}")
    partial = []
    for j, name in enumerate(matrix.names):
        a, b = matrix.values[ga, j], matrix.values[gb, j]
        na, nb = shapiro_wilk(a), shapiro_wilk(b)
        test = choose_test(na[1], nb[1], alpha)
        if test == "TTest":
            stat, p = ttest_ind(a, b)
            kind, eff = "CohensD", cohens_d(a, b)
        else:
            stat, p = mann_whitney_u(a, b)
            kind, eff = "CliffsDelta", cliffs_delta(a, b)
        partial.append((name, (na, nb), test, stat, p, kind, eff))
    adj = bonferroni([r[4] for r in partial], m if m is not None else len(partial))
    return [FeatureTestResult(name, norm, test, stat, p, pa, kind, eff, pa < alpha)
            for (name, norm, test, stat, p, kind, eff), pa in zip(partial, adj)]


def significant_features(results) -> list[str]:
    return [r.feature for r in results if r.significant]


def opposite_significance_pairs(pairs, results) -> list[tuple[str, str, float, bool, bool]]:
    """Correlated pairs whose members disagree on significance."""
    sig = {r.feature: r.significant for r in results}
    out = []
    for f1, f2, r in pairs:
        if sig[f1] != sig[f2]:
            out.append((f1, f2, float(r), sig[f1], sig[f2]))
    return out


ROWS = (("Baseline", "Baseline"), ("Baseline", "Anger"), ("Anger", "Anger"), ("Anger", "Baseline"))
SETS = ("all", "non_significant", "significant")


@dataclass
class GeneralizationReport:
    # cells[(train, eval)][set] = (accuracy, f1) or None when the set is empty
    cells: dict
    sets: dict

    def rows(self) -> list[list]:
        out = []
        for train, ev in ROWS:
            row = [train, ev, "cv3" if train == ev else "holdout"]
            for s in SETS:
                cell = self.cells[(train, ev)][s]
                row += ["", ""] if cell is None else [repr(cell[0]), repr(cell[1])]
            out.append(row)
        return out

    def header(self) -> list[str]:
        h = ["train", "eval", "protocol"]
        for s in SETS:
            h += [f"{s}_accuracy", f"{s}_f1"]
        return h


def emotion_generalization(matrix: FeatureMatrix, forest_params: ForestParams = ForestParams(),
                           seed: int = 0, significant=None, workers: int = 1) -> GeneralizationReport:
    """Within-segment 3-fold CV and cross-segment hold-out for three feature sets."""
    if significant is None:
        significant = significant_features(emotion_feature_tests(matrix))
    significant = set(significant)
    sets = {
        "all": list(matrix.names),
        "non_significant": [n for n in matrix.names if n not in significant],
        "significant": [n for n in matrix.names if n in significant],
    }
    seg = {s: matrix.segment(s) for s in ("Baseline", "Anger")}
    for s, sub in seg.items():
        if len(sub) == 0:
            raise StatTestError(f"no {s} rows")
    cells = {row: {} for row in ROWS}
    for name in SETS:
        cols = sets[name]
        for train, ev in ROWS:
            if not cols:
                cells[(train, ev)][name] = None
                continue
            tr = seg[train].select(cols)
            if train == ev:
                cells[(train, ev)][name] = cross_validate(tr, forest_params, 3, seed, workers)
            else:
                met = evaluate(fit_forest(tr, forest_params, workers), seg[ev].select(cols))
                cells[(train, ev)][name] = (met.accuracy, met.f1)
    return GeneralizationReport(cells, sets)


def write_tests_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TEST_COLUMNS)
        for r in results:
            w.writerow(r.row())
