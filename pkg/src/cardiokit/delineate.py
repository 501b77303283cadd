"""Beat detection, 10-beat ensemble averaging and template fiducials."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigError, DelineationError, InsufficientDataError
from .ingest import SignalRecord

TEMPLATE_S = 0.750
PRE_S = 0.250
N_COHORTS = 9
COHORT_SIZE = 10
ECG_POINTS = ("Q", "R", "S", "T1", "T", "T2")
ICG_POINTS = ("B", "C", "X")


def _ms(value_ms: float, fs: float) -> int:
    return int(round(value_ms * fs / 1000.0))


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x.copy()
    return np.convolve(x, np.ones(width) / width, mode="same")


# --- R and C detection ------------------------------------------------------

def detect_r_peaks(ecg, fs: float, refractory_s: float = 0.200) -> np.ndarray:
    """Pan-Tompkins QRS detection with R refinement on the filtered ECG.

    Derivative, squaring and a 150 ms moving-window integration are computed
    with centred kernels so integrator peaks line up with the QRS. Candidates
    are accepted with the classic running signal/noise peak estimates, a
    T-wave slope check below 360 ms and search-back at 1.66 x mean RR. Each
    detection is moved to the ECG maximum within +-30 ms.
    """
    if fs < 250:
        raise ConfigError(f"fs={fs} too low for QRS detection; need >= 250 Hz")
    x = np.asarray(ecg, dtype=float)
    empty = np.zeros(0, dtype=int)
    if len(x) < 5 or not np.any(x):
        return empty

    deriv = np.convolve(x, np.array([2.0, 1.0, 0.0, -1.0, -2.0]) * fs / 8.0, mode="same")
    mwi = _moving_average(deriv * deriv, max(1, _ms(150, fs)))
    refractory = max(1, int(round(refractory_s * fs)))
    twave_limit = _ms(360, fs)
    half_qrs = _ms(75, fs)
    candidates, _ = signal.find_peaks(mwi, distance=refractory)
    if len(candidates) == 0:
        return empty

    learn = mwi[: int(2 * fs)]
    spki = 0.25 * learn.max()
    npki = 0.5 * learn.mean()

    def slope(p):
        return np.max(np.abs(deriv[max(0, p - half_qrs): p + half_qrs + 1]))

    qrs: list[int] = []
    skipped: list[int] = []
    for p in candidates:
        thr1 = npki + 0.25 * (spki - npki)
        thr2 = 0.5 * thr1
        if len(qrs) >= 2:
            rr_avg = np.mean(np.diff(qrs[-9:]))
            if p - qrs[-1] > 1.66 * rr_avg:
                back = [c for c in skipped
                        if c - qrs[-1] > refractory and p - c > refractory and mwi[c] > thr2]
                if back:
                    best = max(back, key=lambda c: mwi[c])
                    qrs.append(best)
                    spki = 0.25 * mwi[best] + 0.75 * spki
                    skipped = [c for c in skipped if c > best]
        if mwi[p] > thr1 and (not qrs or p - qrs[-1] > refractory):
            if qrs and p - qrs[-1] < twave_limit and slope(p) < 0.5 * slope(qrs[-1]):
                npki = 0.125 * mwi[p] + 0.875 * npki
                skipped.append(p)
                continue
            qrs.append(p)
            spki = 0.125 * mwi[p] + 0.875 * spki
            skipped = []
        else:
            npki = 0.125 * mwi[p] + 0.875 * npki
            skipped.append(p)

    half = _ms(30, fs)
    refined: list[int] = []
    for p in qrs:
        lo, hi = max(0, p - half), min(len(x), p + half + 1)
        r = lo + int(np.argmax(x[lo:hi]))
        if refined and r - refined[-1] <= refractory:
            if x[r] > x[refined[-1]]:
                refined[-1] = r
            continue
        refined.append(r)
    return np.asarray(refined, dtype=int)


def detect_c_points(icg, r_peaks) -> np.ndarray:
    """ICG maximum strictly between each pair of consecutive R peaks."""
    icg = np.asarray(icg, dtype=float)
    r = np.asarray(r_peaks, dtype=int)
    if len(r) < 2:
        raise DelineationError(f"need at least 2 R peaks, got {len(r)}")
    out = np.empty(len(r) - 1, dtype=int)
    for i in range(len(r) - 1):
        lo, hi = r[i] + 1, r[i + 1]
        if hi <= lo:
            raise DelineationError(f"R peaks {r[i]} and {r[i + 1]} leave no room for a C point")
        out[i] = lo + int(np.argmax(icg[lo:hi]))
    return out


# --- ensemble averaging ------------------------------------------------------

@dataclass
class TemplatePair:
    """750 ms ensemble averages: ECG aligned on R, ICG aligned on C, both at 250 ms."""

    ecg_tpl: np.ndarray
    icg_tpl: np.ndarray
    rr_mean: float
    rc_mean: float
    cohort_index: int
    fs: float
    subject_id: str = ""
    segment: str = ""

    def __post_init__(self):
        n = int(round(TEMPLATE_S * self.fs))
        self.ecg_tpl = np.asarray(self.ecg_tpl, dtype=float)
        self.icg_tpl = np.asarray(self.icg_tpl, dtype=float)
        if len(self.ecg_tpl) != n or len(self.icg_tpl) != n:
            raise DelineationError(f"templates must have {n} samples")
        if not 0.3 < self.rr_mean < 2.0:
            raise DelineationError(f"mean RR {self.rr_mean:.3f} s outside (0.3, 2.0)")
        if not 0.0 < self.rc_mean < 0.4:
            raise DelineationError(f"mean RC {self.rc_mean:.3f} s outside (0, 0.4)")

    @property
    def anchor(self) -> int:
        return int(round(PRE_S * self.fs))


def usable_beats(n_samples: int, fs: float, r, c) -> np.ndarray:
    """Indices of beats that have a C point and full ECG and ICG windows."""
    pre = int(round(PRE_S * fs))
    length = int(round(TEMPLATE_S * fs))
    r = np.asarray(r, dtype=int)[: len(c)]
    c = np.asarray(c, dtype=int)
    ok = (r - pre >= 0) & (r - pre + length <= n_samples) & (c - pre >= 0) & (c - pre + length <= n_samples)
    return np.flatnonzero(ok)


def ensemble_average(rec: SignalRecord, r, c) -> list[TemplatePair]:
    """Nine consecutive, non-overlapping 10-beat cohorts from the first usable beat."""
    fs = rec.fs
    r = np.asarray(r, dtype=int)
    c = np.asarray(c, dtype=int)
    beats = usable_beats(len(rec.ecg), fs, r, c)
    need = N_COHORTS * COHORT_SIZE
    if len(beats) < need:
        raise InsufficientDataError(
            f"{rec.subject_id}/{rec.segment}: {len(beats)} usable beats, need {need}")
    pre = int(round(PRE_S * fs))
    length = int(round(TEMPLATE_S * fs))
    offs = np.arange(length) - pre
    pairs = []
    for k in range(N_COHORTS):
        idx = beats[k * COHORT_SIZE:(k + 1) * COHORT_SIZE]
        ecg_tpl = rec.ecg[r[idx][:, None] + offs].mean(axis=0)
        icg_tpl = rec.icg[c[idx][:, None] + offs].mean(axis=0)
        rr_mean = float(np.mean(r[idx + 1] - r[idx]) / fs)
        rc_mean = float(np.mean(c[idx] - r[idx]) / fs)
        pairs.append(TemplatePair(ecg_tpl, icg_tpl, rr_mean, rc_mean, k, fs,
                                  rec.subject_id, rec.segment))
    return pairs


# --- template fiducials -----------------------------------------------------

@dataclass
class FiducialMap:
    """Sample indices within the templates; ``flags`` names points found on a window edge."""

    ecg: dict[str, int]
    icg: dict[str, int]
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        e, i = self.ecg, self.icg
        if not e["Q"] < e["R"] < e["S"] < e["T1"] < e["T"] < e["T2"]:
            raise DelineationError(f"ECG fiducial order violated: {e}")
        if not i["B"] < i["C"] < i["X"]:
            raise DelineationError(f"ICG fiducial order violated: {i}")

    @property
    def quality_ok(self) -> bool:
        return not self.flags

    def to_json(self) -> dict:
        return {
            "ecg": {k: int(self.ecg[k]) for k in ECG_POINTS},
            "icg": {k: int(self.icg[k]) for k in ICG_POINTS},
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, d: dict) -> "FiducialMap":
        return cls(dict(d["ecg"]), dict(d["icg"]), tuple(d.get("flags", ())))


def _window(lo: int, hi: int, n: int, what: str) -> tuple[int, int]:
    lo, hi = max(lo, 0), min(hi, n - 1)
    if hi < lo:
        raise DelineationError(f"empty search window for {what}")
    return lo, hi


def delineate_ecg_template(tpl, fs: float) -> tuple[dict[str, int], list[str]]:
    """Q, S, T and T-wave boundaries on an R-centred template.

    T1 and T2 are found by walking outward from the steepest up- and
    down-slope of the T wave until the 5 ms smoothed first difference crosses
    zero or comes within 5% of the flattest slope on that side. Measuring
    against the flattest slope tolerates the ST tilt left by high-pass
    filtering.
    """
    x = np.asarray(tpl, dtype=float)
    n = len(x)
    R = int(round(PRE_S * fs))
    flags: list[str] = []

    lo, hi = _window(R - _ms(50, fs), R - 1, n, "Q")
    Q = lo + int(np.argmin(x[lo:hi + 1]))
    if Q in (lo, hi):
        flags.append("Q")
    lo, hi = _window(R + 1, R + _ms(100, fs), n, "S")
    S = lo + int(np.argmin(x[lo:hi + 1]))
    if S in (lo, hi):
        flags.append("S")
    lo, hi = _window(S + _ms(80, fs), S + _ms(360, fs), n, "T")
    T = lo + int(np.argmax(x[lo:hi + 1]))
    if T in (lo, hi):
        flags.append("T")

    d = _moving_average(np.diff(x), max(1, _ms(5, fs)))
    # skip the S-wave recovery: start at the flattest point after its upstroke
    p = S + int(np.argmax(d[S:min(S + _ms(40, fs), T)]))
    lo = max(T - _ms(200, fs), p + int(np.argmin(d[p:T])))
    if lo >= T:
        raise DelineationError("no room for T onset")
    j = lo + int(np.argmax(d[lo:T]))
    if d[j] <= 0:
        raise DelineationError("T wave has no rising limb")
    tilt = max(0.0, float(np.min(d[lo:j + 1])))
    thr = tilt + 0.05 * (d[j] - tilt)
    T1 = None
    for i in range(j, lo - 1, -1):
        if d[i] <= thr:
            T1 = i + 1
            break
    if T1 is None:
        T1 = lo
        flags.append("T1")

    hi = min(T + _ms(250, fs), n - 2)
    if hi <= T:
        raise DelineationError("no room for T offset")
    j = T + int(np.argmin(d[T:hi + 1]))
    if d[j] >= 0:
        raise DelineationError("T wave has no falling limb")
    tilt = min(0.0, float(np.max(d[j:hi + 1])))
    thr = tilt + 0.05 * (d[j] - tilt)
    T2 = None
    for i in range(j, hi + 1):
        if d[i] >= thr:
            T2 = i
            break
    if T2 is None:
        T2 = hi
        flags.append("T2")
    return {"Q": Q, "R": R, "S": S, "T1": T1, "T": T, "T2": T2}, flags


def delineate_icg_template(tpl, fs: float) -> tuple[dict[str, int], list[str]]:
    """B as the peak of smoothed curvature before C; X as the post-C minimum."""
    x = np.asarray(tpl, dtype=float)
    n = len(x)
    C = int(round(PRE_S * fs))
    flags: list[str] = []
    dd = _moving_average(np.diff(x, 2), max(1, _ms(5, fs)))  # dd[k] is centred on sample k + 1
    lo, hi = _window(C - _ms(150, fs), C - _ms(10, fs), n - 1, "B")
    lo = max(lo, 1)
    B = lo + int(np.argmax(dd[lo - 1:hi]))
    if B in (lo, hi):
        flags.append("B")
    lo, hi = _window(C + 1, C + _ms(300, fs), n, "X")
    X = lo + int(np.argmin(x[lo:hi + 1]))
    if X in (lo, hi):
        flags.append("X")
    return {"B": B, "C": C, "X": X}, flags


def delineate_template(tp: TemplatePair) -> FiducialMap:
    ecg, f1 = delineate_ecg_template(tp.ecg_tpl, tp.fs)
    icg, f2 = delineate_icg_template(tp.icg_tpl, tp.fs)
    return FiducialMap(ecg, icg, tuple(f1 + f2))


def templates_from_record(rec: SignalRecord) -> list[TemplatePair]:
    """R peaks, C points and ensemble averages for one filtered record."""
    r = detect_r_peaks(rec.ecg, rec.fs)
    c = detect_c_points(rec.icg, r)
    return ensemble_average(rec, r, c)


def dump_template(tp: TemplatePair, fm: FiducialMap | None, directory, stem: str) -> None:
    """Write ``stem.csv`` (t_ms, ecg, icg) and ``stem.json`` with the fiducials."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t_ms = (np.arange(len(tp.ecg_tpl)) - tp.anchor) * 1000.0 / tp.fs
    with open(directory / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ms", "ecg", "icg"])
        for row in zip(t_ms, tp.ecg_tpl, tp.icg_tpl):
            w.writerow([repr(float(v)) for v in row])
    meta = {
        "subject": tp.subject_id, "segment": tp.segment, "cohort": tp.cohort_index,
        "fs": tp.fs, "rr_mean": tp.rr_mean, "rc_mean": tp.rc_mean,
        "fiducials": None if fm is None else fm.to_json(),
    }
    (directory / f"{stem}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_template(directory, stem: str) -> tuple[TemplatePair, FiducialMap | None]:
    """Inverse of :func:`dump_template`."""
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}.json").read_text())
    data = np.loadtxt(directory / f"{stem}.csv", delimiter=",", skiprows=1, ndmin=2)
    tp = TemplatePair(data[:, 1], data[:, 2], meta["rr_mean"], meta["rc_mean"], meta["cohort"],
                      meta["fs"], meta["subject"], meta["segment"])
    fid = meta.get("fiducials")
    return tp, None if fid is None else FiducialMap.from_json(fid)
