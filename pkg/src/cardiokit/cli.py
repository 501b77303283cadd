"""Command-line pipeline: stages read and write plain CSV/JSON artifacts in one output directory."""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .delineate import dump_template, load_template, templates_from_record
from .dsp import preprocess_record
from .emostats import (
    emotion_feature_tests, emotion_generalization, opposite_significance_pairs,
    significant_features, write_tests_csv,
)
from .errors import ConfigError, DataError, StageError
from .features import build_feature_matrix, delineate_all
from .forest import Forest, ForestParams, evaluate, fit_forest
from .ingest import (
    DatasetManifest, generate_synthetic_cohort, load_dataset, save_dataset, stratified_split,
)
from .interpret import (
    cluster_features, cluster_shuffle_accuracy, consensus_top_k, correlation_analysis,
    gini_report, permutation_importance, representative_shuffle_gini, shap_report,
)
from .matrix import FeatureMatrix
from .select import GaParams, SelectionResult, ga_select, intersect_subsets, rfecv

log = logging.getLogger("cardiokit")

SCHEMA = 1
STAGES = ("synth", "preprocess", "delineate", "features", "train", "evaluate", "importance",
          "clusters", "select", "emostats", "report")

# section -> key -> (default, comment)
DEFAULTS: dict[str, dict[str, tuple[object, str]]] = {
    "run": {
        "seed": (0, "single source of all randomness"),
        "workers": (1, "threads for tree fitting and per-record work; never changes results"),
        "out": ("", "output directory; falls back to $CARDIOKIT_OUT, then ./cardiokit-out"),
    },
    "data": {
        "manifest": ("", "JSON manifest of real recordings; leave empty for synthetic data"),
        "synthetic": ("n=20,beats=90,fs=1000", "synthetic cohort as n=K,beats=B,fs=F"),
        "snr_db": (20.0, "synthetic white-noise SNR in dB"),
        "emotion_strength": (1.0, "scale of the planted anger effect in synthetic data"),
    },
    "filter": {
        "order": (4, "Butterworth prototype order"),
        "ecg_lo_hz": (1.0, "ECG band 1-40 Hz"),
        "ecg_hi_hz": (40.0, ""),
        "icg_lo_hz": (0.5, "ICG band 0.5-40 Hz"),
        "icg_hi_hz": (40.0, ""),
    },
    "split": {
        "test_ratio": (0.33, "per-subject test fraction"),
    },
    "forest": {
        "n_trees": (100, ""),
        "max_features": ("sqrt", "sqrt, all, or an integer"),
        "min_samples_split": (2, ""),
        "min_samples_leaf": (1, ""),
        "max_depth": ("none", "none for unlimited"),
        "bootstrap": (True, ""),
    },
    "importance": {
        "n_repeat": (100, "permutations per feature and per cluster"),
        "top_k": (10, "size of each ranking entering the consensus"),
    },
    "clusters": {
        "threshold": (0.7, "edges need |r| strictly above this"),
    },
    "select": {
        "cv_folds": (5, "RFECV folds"),
        "step": (1, "features dropped per RFECV round"),
    },
    "ga": {
        "population": (50, ""),
        "generations": (50, ""),
        "crossover_prob": (0.5, ""),
        "mutation_prob": (0.1, ""),
        "tournament_size": (3, ""),
        "per_gene_flip": (0.05, ""),
        "elitism": (1, ""),
        "cv_folds": (3, ""),
    },
    "emostats": {
        "alpha": (0.05, "significance level on Bonferroni-adjusted p"),
    },
}


def emit_config_template(path) -> None:
    lines = ["# cardiokit configuration; every value below is the built-in default", ""]
    for section, keys in DEFAULTS.items():
        lines.append(f"[{section}]")
        for key, (value, comment) in keys.items():
            if comment:
                lines.append(f"# {comment}")
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(section: str, key: str, raw: str):
    default = DEFAULTS[section][key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return raw


def load_config(path=None) -> dict[str, dict[str, object]]:
    cfg = {s: {k: v[0] for k, v in keys.items()} for s, keys in DEFAULTS.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
            cfg[section][key] = _convert(section, key, raw)
    return cfg


def parse_synthetic(spec: str) -> dict[str, float]:
    out = {"n": 20, "beats": 90, "fs": 1000.0}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        key, sep, value = part.partition("=")
        if not sep or key not in out:
            raise ConfigError(f"bad --synthetic item {part!r}; expected n=K,beats=B,fs=F")
        try:
            out[key] = float(value) if key == "fs" else int(value)
        except ValueError:
            raise ConfigError(f"bad --synthetic value {part!r}") from None
    return out


@dataclass
class Context:
    cfg: dict
    out: Path
    seed: int
    workers: int

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def need(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise StageError(f"missing prior-stage artifact: {p}")
        return p

    def forest_params(self) -> ForestParams:
        f = self.cfg["forest"]
        mf = f["max_features"]
        if mf not in ("sqrt", "all"):
            try:
                mf = int(mf)
            except ValueError:
                raise ConfigError(f"[forest] max_features: bad value {mf!r}") from None
        try:
            depth = None if str(f["max_depth"]).lower() == "none" else int(f["max_depth"])
        except ValueError:
            raise ConfigError(f"[forest] max_depth: bad value {f['max_depth']!r}") from None
        return ForestParams(f["n_trees"], mf, f["min_samples_split"], f["min_samples_leaf"],
                            depth, f["bootstrap"], self.seed)

    def ga_params(self) -> GaParams:
        return GaParams(seed=self.seed, **self.cfg["ga"])


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema": SCHEMA, **obj}, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StageError(f"{path}: corrupt JSON ({exc})") from None


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(v) -> str:
    return "" if v is None else repr(float(v))


# --- stages ---------------------------------------------------------------------

def stage_synth(ctx: Context) -> None:
    data = ctx.cfg["data"]
    if data["manifest"]:
        raise ConfigError("synth stage needs a synthetic data source, but a manifest is configured")
    syn = parse_synthetic(data["synthetic"])
    records, truths = generate_synthetic_cohort(
        syn["n"], syn["beats"], syn["fs"], ctx.seed, snr_db=data["snr_db"],
        emotion_strength=data["emotion_strength"])
    save_dataset(records, ctx.path("raw"))
    truth = {f"{r.subject_id}_{r.segment}": t.to_json() for r, t in zip(records, truths)}
    _write_json(ctx.path("raw", "truth.json"), {"records": truth})


def _source_manifest(ctx: Context) -> DatasetManifest:
    if ctx.cfg["data"]["manifest"]:
        return DatasetManifest.from_json(ctx.cfg["data"]["manifest"])
    return DatasetManifest.from_json(ctx.need("raw", "manifest.json"))


def stage_preprocess(ctx: Context) -> None:
    flt = ctx.cfg["filter"]
    records = load_dataset(_source_manifest(ctx))

    def one(rec):
        return preprocess_record(rec, (flt["ecg_lo_hz"], flt["ecg_hi_hz"]),
                                 (flt["icg_lo_hz"], flt["icg_hi_hz"]), flt["order"])

    save_dataset(_map(one, records, ctx.workers), ctx.path("filtered"))


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def stage_delineate(ctx: Context) -> None:
    records = load_dataset(DatasetManifest.from_json(ctx.need("filtered", "manifest.json")))
    parts = _map(lambda rec: delineate_all(templates_from_record(rec)), records, ctx.workers)
    stems = []
    for tp, fm in (item for part in parts for item in part):
        stem = f"{tp.subject_id}_{tp.segment}_c{tp.cohort_index}"
        dump_template(tp, fm, ctx.path("templates"), stem)
        stems.append(stem)
    _write_json(ctx.path("templates", "index.json"), {"templates": stems})


def stage_features(ctx: Context) -> None:
    tdir = ctx.need("templates", "index.json").parent
    stems = _read_json(tdir / "index.json")["templates"]
    matrix, dropped = build_feature_matrix(load_template(tdir, s) for s in stems)
    matrix.to_csv(ctx.path("features.csv"))
    _write_json(ctx.path("features.json"), {"rows": len(matrix), "dropped": dropped,
                                            "columns": list(matrix.names)})


def _features(ctx: Context) -> FeatureMatrix:
    return FeatureMatrix.from_csv(ctx.need("features.csv"))


def _split(ctx: Context) -> tuple[FeatureMatrix, FeatureMatrix]:
    m = _features(ctx)
    s = _read_json(ctx.need("split.json"))
    return m.take(s["train_rows"]), m.take(s["test_rows"])


def stage_train(ctx: Context) -> None:
    m = _features(ctx)
    train, _, tr_rows, te_rows = stratified_split(m, ctx.cfg["split"]["test_ratio"], ctx.seed)
    _write_json(ctx.path("split.json"), {"train_rows": [int(i) for i in tr_rows],
                                         "test_rows": [int(i) for i in te_rows],
                                         "test_ratio": ctx.cfg["split"]["test_ratio"], "seed": ctx.seed})
    fit_forest(train, ctx.forest_params(), ctx.workers).save(ctx.path("model.json"))


def _model(ctx: Context) -> Forest:
    return Forest.load(ctx.need("model.json"))


def _metrics_json(met) -> dict:
    return {**met.summary(), "per_class": met.per_class}


def stage_evaluate(ctx: Context) -> None:
    forest = _model(ctx)
    _, test = _split(ctx)
    met = evaluate(forest, test)
    _write_json(ctx.path("metrics.json"), _metrics_json(met))
    _write_csv(ctx.path("confusion.csv"), ["true\\pred"] + met.labels,
               [[lab] + [int(v) for v in row] for lab, row in zip(met.labels, met.confusion)])


def stage_importance(ctx: Context) -> None:
    forest = _model(ctx)
    _, test = _split(ctx)
    imp = ctx.cfg["importance"]
    reports = [gini_report(forest),
               permutation_importance(forest, test, imp["n_repeat"], ctx.seed),
               shap_report(forest, test)]
    for rep in reports:
        _write_csv(ctx.path(f"importance_{rep.method.lower()}.csv"),
                   ["rank", "feature", "score", "std"], rep.to_rows())
    k = imp["top_k"]
    consensus = consensus_top_k(reports, k)
    sets = {rep.method: rep.top(k) for rep in reports}
    # retrain on the consensus subset
    train, test = _split(ctx)
    chosen = [n for n in train.names if n in consensus]
    sub = None
    if chosen:
        sub = _metrics_json(evaluate(fit_forest(train.select(chosen), ctx.forest_params(), ctx.workers),
                                     test.select(chosen)))
    _write_json(ctx.path("importance.json"), {"top_k": k, "sets": sets, "consensus": chosen,
                                              "consensus_metrics": sub})


def _representative(cluster: set[str], edges) -> tuple[str, dict[str, float]]:
    """Member correlated with the most others (then strongest total |r|, then name)."""
    nb: dict[str, dict[str, float]] = {n: {} for n in cluster}
    for a, b, r in edges:
        if a in cluster and b in cluster:
            nb[a][b] = r
            nb[b][a] = r
    rep = min(cluster, key=lambda n: (-len(nb[n]), -sum(abs(v) for v in nb[n].values()), n))
    return rep, nb[rep]


def stage_clusters(ctx: Context) -> None:
    m = _features(ctx)
    corr = correlation_analysis(m)
    names = list(m.names)
    for basis, r, p in (("pearson", corr.pearson, corr.pearson_p),
                        ("spearman", corr.spearman, corr.spearman_p)):
        _write_csv(ctx.path(f"correlation_{basis}.csv"), [""] + names,
                   [[n] + [_f(v) if np.isfinite(v) else "" for v in row] for n, row in zip(names, r)])
        _write_csv(ctx.path(f"correlation_{basis}_p.csv"), [""] + names,
                   [[n] + [_f(v) if np.isfinite(v) else "" for v in row] for n, row in zip(names, p)])
    thr = ctx.cfg["clusters"]["threshold"]
    pearson_pairs = {(a, b): r for a, b, r in corr.pairs(thr, "pearson")}
    spearman_pairs = {(a, b): r for a, b, r in corr.pairs(thr, "spearman")}
    rows = []
    for key in sorted(set(pearson_pairs) | set(spearman_pairs),
                      key=lambda k: (-abs(corr.pearson[names.index(k[0]), names.index(k[1])]), k)):
        i, j = names.index(key[0]), names.index(key[1])
        method = ("Both" if key in pearson_pairs and key in spearman_pairs
                  else "Pearson only" if key in pearson_pairs else "Spearman only")
        rows.append([key[0], key[1], _f(corr.pearson[i, j]), _f(corr.spearman[i, j]), method])
    _write_csv(ctx.path("correlated_pairs.csv"), ["feature1", "feature2", "pearson", "spearman", "method"], rows)

    cs = cluster_features(corr, thr, "pearson")
    _write_json(ctx.path("clusters.json"), cs.to_json())

    forest = _model(ctx)
    train, test = _split(ctx)
    n_repeat = ctx.cfg["importance"]["n_repeat"]
    out = []
    for cluster in cs.clusters:
        rep, partners = _representative(cluster, cs.edges)
        drop = cluster_shuffle_accuracy(forest, test, cluster, ctx.seed, n_repeat)
        res = representative_shuffle_gini(train, test, rep, ctx.forest_params(), ctx.seed,
                                          sorted(partners), ctx.workers)
        out.append({"cluster": sorted(cluster), "representative": rep,
                    "partners": [[p, partners[p], res.partners[p]]
                                 for p in sorted(partners, key=lambda q: (-abs(partners[q]), q))],
                    "others_summary": res.others_summary,
                    "cluster_accuracy_drop": drop,
                    "representative_accuracy_drop": res.accuracy_drop})
    out.sort(key=lambda c: (-c["cluster_accuracy_drop"], c["representative"]))
    _write_json(ctx.path("cluster_shuffle.json"), {"n_repeat": n_repeat, "clusters": out})


def stage_select(ctx: Context) -> None:
    train, test = _split(ctx)
    params = ctx.forest_params()
    sel = ctx.cfg["select"]
    rf = rfecv(train, params, sel["cv_folds"], sel["step"], ctx.workers)
    ga = ga_select(train, params, ctx.ga_params(), ctx.workers)
    both = intersect_subsets(rf, ga)
    metrics = {}
    for res in (rf, ga, both):
        res.save(ctx.path(f"selection_{res.method.lower()}.json"))
        if res.selected:
            forest = fit_forest(train.select(res.selected), params, ctx.workers)
            metrics[res.method] = _metrics_json(evaluate(forest, test.select(res.selected)))
        else:
            metrics[res.method] = None
    _write_json(ctx.path("selection_metrics.json"), {"metrics": metrics})


def stage_emostats(ctx: Context) -> None:
    m = _features(ctx)
    alpha = ctx.cfg["emostats"]["alpha"]
    results = emotion_feature_tests(m, alpha=alpha)
    write_tests_csv(results, ctx.path("emotion_tests.csv"))
    sig = significant_features(results)
    corr = correlation_analysis(m)
    pairs = corr.pairs(ctx.cfg["clusters"]["threshold"], "pearson")
    pairs.sort(key=lambda p: (-abs(p[2]), p[0], p[1]))
    opp = opposite_significance_pairs(pairs, results)
    _write_csv(ctx.path("opposite_pairs.csv"),
               ["feature1", "feature2", "pearson", "feature1_significant", "feature2_significant"],
               [[a, b, _f(r), s1, s2] for a, b, r, s1, s2 in opp])
    gen = emotion_generalization(m, ctx.forest_params(), ctx.seed, sig, ctx.workers)
    _write_csv(ctx.path("generalization.csv"), gen.header(), gen.rows())
    _write_json(ctx.path("emostats.json"), {
        "alpha": alpha, "significant": sig,
        "note": "rows of one subject are pooled per segment and treated as independent observations",
    })


def stage_report(ctx: Context) -> None:
    _model(ctx)
    need = ["metrics.json", "correlated_pairs.csv", "cluster_shuffle.json", "correlation_pearson.csv",
            "opposite_pairs.csv", "generalization.csv", "importance.json",
            "selection_rfecv.json", "selection_ga.json", "selection_intersection.json"]
    for name in need:
        ctx.need(name)
    rdir = ctx.path("report")
    rdir.mkdir(parents=True, exist_ok=True)

    def copy_csv(src, dst):
        (rdir / dst).write_text(ctx.path(src).read_text())

    copy_csv("correlated_pairs.csv", "table1.csv")
    cl = _read_json(ctx.path("cluster_shuffle.json"))["clusters"]
    rows = []
    for c in cl:
        s = c["others_summary"]
        for i, (partner, r, change) in enumerate(c["partners"]):
            first = i == 0
            rows.append([c["representative"] if first else "", partner, _f(r), _f(change)]
                        + ([_f(s.get(k)) for k in ("min", "q25", "median", "q75", "max")]
                           + [_f(c["cluster_accuracy_drop"])] if first else [""] * 6))
    _write_csv(rdir / "table2.csv", ["variable1", "variable2", "correlation", "relative_change_pct",
                                     "others_min", "others_q25", "others_median", "others_q75",
                                     "others_max", "accuracy_drop_pct"], rows)
    copy_csv("opposite_pairs.csv", "table3.csv")
    copy_csv("generalization.csv", "table4.csv")
    copy_csv("correlation_pearson.csv", "heatmap.csv")
    imp = _read_json(ctx.path("importance.json"))
    _write_json(rdir / "venn_importance.json", {"sets": imp["sets"], "intersection": imp["consensus"]})
    rf = SelectionResult.load(ctx.path("selection_rfecv.json"))
    ga = SelectionResult.load(ctx.path("selection_ga.json"))
    both = SelectionResult.load(ctx.path("selection_intersection.json"))
    _write_json(rdir / "venn_selection.json", {"sets": {"RFECV": rf.selected, "GA": ga.selected},
                                               "intersection": both.selected})
    keys = ("accuracy", "precision", "recall", "f1")

    def brief(met):
        return None if met is None else {k: met[k] for k in keys}

    sel = _read_json(ctx.need("selection_metrics.json"))["metrics"]
    _write_json(rdir / "summary.json", {
        "all_features": brief(_read_json(ctx.path("metrics.json"))),
        "consensus": brief(imp["consensus_metrics"]),
        "selection": {k: brief(v) for k, v in sel.items()},
    })


STAGE_FUNCS = {
    "synth": stage_synth, "preprocess": stage_preprocess, "delineate": stage_delineate,
    "features": stage_features, "train": stage_train, "evaluate": stage_evaluate,
    "importance": stage_importance, "clusters": stage_clusters, "select": stage_select,
    "emostats": stage_emostats, "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cardiokit", description="ECG/ICG biometric identification pipeline")
    p.add_argument("--version", action="version", version=f"cardiokit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--synthetic", metavar="n=K,beats=B,fs=F")
        sp.add_argument("-v", "--verbose", action="store_true")
    tpl = sub.add_parser("config-template", help="write a commented configuration file with all defaults")
    tpl.add_argument("path")
    return p


def make_context(args) -> Context:
    cfg = load_config(args.config)
    if args.synthetic is not None:
        if cfg["data"]["manifest"]:
            raise ConfigError("both a manifest and --synthetic given; choose one data source")
        parse_synthetic(args.synthetic)
        cfg["data"]["synthetic"] = args.synthetic
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.workers is not None:
        cfg["run"]["workers"] = args.workers
    if cfg["run"]["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    if cfg["run"]["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    out = args.out or cfg["run"]["out"] or os.environ.get("CARDIOKIT_OUT") or "cardiokit-out"
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    ctx = Context(cfg, out, cfg["run"]["seed"], cfg["run"]["workers"])
    ctx.forest_params()
    ctx.ga_params()
    return ctx


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "config-template":
            emit_config_template(args.path)
            return 0
        ctx = make_context(args)
        if args.command == "all":
            stages = STAGES if not ctx.cfg["data"]["manifest"] else STAGES[1:]
        else:
            stages = (args.command,)
        for name in stages:
            log.info("stage %s", name)
            STAGE_FUNCS[name](ctx)
    except ConfigError as exc:
        print(f"cardiokit: configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"cardiokit: data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"cardiokit: I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
