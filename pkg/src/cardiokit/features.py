"""The 29 template features and assembly of the labeled feature matrix."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Sequence

import numpy as np

from .delineate import PRE_S, FiducialMap, TemplatePair, delineate_template, templates_from_record
from .dsp import preprocess_record
from .errors import DelineationError, FeatureError
from .matrix import FEATURE_NAMES, FeatureMatrix

log = logging.getLogger(__name__)


def bazett_correct(interval_s: float, rr_s: float) -> float:
    if not rr_s > 0:
        raise FeatureError(f"RR must be positive for Bazett correction, got {rr_s}")
    return interval_s / math.sqrt(rr_s)


def crest_factor(segment) -> float:
    """Peak magnitude over RMS."""
    x = np.asarray(segment, dtype=float)
    if x.size == 0:
        raise FeatureError("crest factor of an empty segment")
    rms = math.sqrt(float(np.mean(x * x)))
    if rms == 0.0:
        raise FeatureError("crest factor undefined for an all-zero segment")
    return float(np.max(np.abs(x))) / rms


def extract_features(tp: TemplatePair, fm: FiducialMap) -> np.ndarray:
    """Feature vector in ``FEATURE_NAMES`` order.

    ICG points are placed on the R-referenced time axis through ``rc_mean``
    because the two templates are anchored on different events.
    """
    e, i = fm.ecg, fm.icg
    if not (e["Q"] < e["R"] < e["S"] < e["T1"] < e["T"] < e["T2"] and i["B"] < i["C"] < i["X"]):
        raise FeatureError(f"fiducial ordering violated: {e} {i}")
    fs, rr = tp.fs, tp.rr_mean
    ecg, icg = tp.ecg_tpl, tp.icg_tpl

    def t_ecg(k):  # seconds relative to R
        return (e[k] - e["R"]) / fs

    def span(a, b):  # same-signal duration, seconds
        return (e[b] - e[a]) / fs

    def t_icg(k):
        return i[k] / fs - PRE_S + tp.rc_mean

    def slope(sig, a, b):
        return (sig[b] - sig[a]) / ((b - a) / fs)

    def bz(v):
        return bazett_correct(v, rr)

    f = {
        "RR_int": rr,
        "QRS_int": bz(span("Q", "S")),
        "T_int": bz(span("T1", "T2")),
        "QT_int": bz(span("Q", "T2")),
        "ST_int": bz(span("S", "T2")),
        "RQ_amp": ecg[e["R"]] - ecg[e["Q"]],
        "RS_amp": ecg[e["R"]] - ecg[e["S"]],
        "RT_amp": ecg[e["R"]] - ecg[e["T"]],
        "TT1_amp": ecg[e["T"]] - ecg[e["T1"]],
        "TT2_amp": ecg[e["T"]] - ecg[e["T2"]],
        "QR_slope": slope(ecg, e["Q"], e["R"]),
        "RS_slope": slope(ecg, e["S"], e["R"]),
        "TT1_slope": slope(ecg, e["T1"], e["T"]),
        "TT2_slope": slope(ecg, e["T"], e["T2"]),
        "ECGQRScrest": crest_factor(ecg[e["Q"]:e["S"] + 1]),
        "ECGTcrest": crest_factor(ecg[e["T1"]:e["T2"] + 1]),
        "BX_int": bz((i["X"] - i["B"]) / fs),
        "CB_amp": icg[i["C"]] - icg[i["B"]],
        "CX_amp": icg[i["C"]] - icg[i["X"]],
        "CB_slope": slope(icg, i["B"], i["C"]),
        "CX_slope": slope(icg, i["C"], i["X"]),
        "ICGcrest": crest_factor(icg[i["B"]:i["X"] + 1]),
        "RC_int": bz(tp.rc_mean),
        "QX_int": bz(t_icg("X") - t_ecg("Q")),
        "QB_int": bz(t_icg("B") - t_ecg("Q")),
        "SX_int": bz(t_icg("X") - t_ecg("S")),
        "SB_int": bz(t_icg("B") - t_ecg("S")),
        "BT_int": bz(t_icg("B") - t_ecg("T")),
        "TX_int": bz(t_icg("X") - t_ecg("T")),
    }
    out = np.array([float(f[k]) for k in FEATURE_NAMES])
    if not np.all(np.isfinite(out)):
        raise FeatureError("non-finite feature value")
    return out


def build_feature_matrix(items: Iterable[tuple[TemplatePair, FiducialMap | None]]) -> tuple[FeatureMatrix, int]:
    """Rows sorted by subject, segment and cohort; flagged or missing maps are dropped.

    Returns the matrix and the number of dropped templates.
    """
    rows = []
    dropped = 0
    for tp, fm in items:
        if fm is None or not fm.quality_ok:
            dropped += 1
            log.warning("dropping %s/%s cohort %d: %s", tp.subject_id, tp.segment, tp.cohort_index,
                        "delineation failed" if fm is None else "flagged " + ",".join(fm.flags))
            continue
        rows.append(((tp.subject_id, _segment_rank(tp.segment), tp.cohort_index), tp, extract_features(tp, fm)))
    if not rows:
        raise FeatureError("no usable templates")
    rows.sort(key=lambda r: r[0])
    if dropped:
        log.warning("%d template(s) dropped", dropped)
    return FeatureMatrix(
        np.vstack([r[2] for r in rows]),
        [r[1].subject_id for r in rows],
        [r[1].segment for r in rows],
        [r[1].cohort_index for r in rows],
    ), dropped


def _segment_rank(seg: str):
    order = ("Baseline", "Anger")
    return (order.index(seg), seg) if seg in order else (len(order), seg)


def delineate_all(pairs: Sequence[TemplatePair]) -> list[tuple[TemplatePair, FiducialMap | None]]:
    """Delineate every template; templates whose windows collapse map to ``None``."""
    out = []
    for tp in pairs:
        try:
            out.append((tp, delineate_template(tp)))
        except DelineationError as exc:
            log.warning("%s/%s cohort %d: %s", tp.subject_id, tp.segment, tp.cohort_index, exc)
            out.append((tp, None))
    return out


def features_from_records(records, workers: int = 1) -> tuple[FeatureMatrix, int]:
    """Filter, average, delineate and extract features for raw records."""
    def one(rec):
        return delineate_all(templates_from_record(preprocess_record(rec)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(one, records))
    else:
        parts = [one(r) for r in records]
    return build_feature_matrix([item for part in parts for item in part])
