"""Recordings: loading, synthetic cohorts and stratified train/test splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import SEGMENTS
from .errors import (
    ConfigError, LengthError, LoadError, ManifestError, ParseError, SplitError,
)
from .matrix import FeatureMatrix

MANIFEST_FORMAT = "csv2"
MIN_SECONDS = 20


@dataclass
class SignalRecord:
    subject_id: str
    segment: str
    fs: float
    ecg: np.ndarray
    icg: np.ndarray

    def __post_init__(self):
        self.ecg = np.asarray(self.ecg, dtype=float)
        self.icg = np.asarray(self.icg, dtype=float)
        if not self.fs > 0:
            raise ConfigError(f"sampling rate must be positive, got {self.fs}")
        if self.segment not in SEGMENTS:
            raise ConfigError(f"segment must be one of {SEGMENTS}, got {self.segment!r}")
        if self.ecg.shape != self.icg.shape or self.ecg.ndim != 1:
            raise ConfigError("ecg and icg must be 1-D sequences of equal length")
        if len(self.ecg) < MIN_SECONDS * self.fs:
            raise LengthError(
                f"{self.subject_id}/{self.segment}: {len(self.ecg)} samples is shorter than "
                f"{MIN_SECONDS} s at {self.fs} Hz")

    @property
    def duration(self) -> float:
        return len(self.ecg) / self.fs

    def replace(self, ecg=None, icg=None) -> "SignalRecord":
        return SignalRecord(
            self.subject_id, self.segment, self.fs,
            self.ecg if ecg is None else ecg,
            self.icg if icg is None else icg,
        )


@dataclass
class SyntheticGroundTruth:
    """Planted landmarks of one synthetic record.

    ``fiducial_offsets`` maps Q, S, T1, T, T2, B, C, X to per-beat offsets in
    seconds relative to the beat's R peak.
    """

    r_times: np.ndarray
    fiducial_offsets: dict[str, np.ndarray]
    subject_params: dict[str, float]

    def to_json(self) -> dict:
        return {
            "r_times": [int(v) for v in self.r_times],
            "fiducial_offsets": {k: [float(x) for x in v] for k, v in self.fiducial_offsets.items()},
            "subject_params": {k: float(v) for k, v in sorted(self.subject_params.items())},
        }


@dataclass
class ManifestEntry:
    subject_id: str
    segment: str
    path: Path
    fs: float


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    format: str = MANIFEST_FORMAT
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            key = (e.subject_id, e.segment)
            if key in seen:
                raise ManifestError(f"duplicate manifest entry {key}")
            seen.add(key)
            if not (isinstance(e.fs, (int, float)) and e.fs > 0):
                raise ManifestError(f"entry {key}: fs must be > 0, got {e.fs!r}")
            if e.segment not in SEGMENTS:
                raise ManifestError(f"entry {key}: unknown segment {e.segment!r}")

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise LoadError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from None
        if isinstance(raw, dict):
            fmt = raw.get("format", MANIFEST_FORMAT)
            raw = raw.get("entries", [])
        else:
            fmt = MANIFEST_FORMAT
        entries = []
        for i, item in enumerate(raw):
            try:
                entries.append(ManifestEntry(
                    str(item["subject_id"]), str(item["segment"]),
                    Path(item["path"]), item["fs"],
                ))
            except (KeyError, TypeError):
                raise ManifestError(f"{path}: entry {i} needs subject_id, segment, path, fs") from None
        return cls(entries, fmt, path.parent)

    def to_json(self, path) -> None:
        data = [
            {"subject_id": e.subject_id, "segment": e.segment, "path": str(e.path), "fs": e.fs}
            for e in self.entries
        ]
        Path(path).write_text(json.dumps(data, indent=1) + "\n")

    def resolve(self, entry: ManifestEntry) -> Path:
        return entry.path if entry.path.is_absolute() else self.root / entry.path


def _scan_for_bad_row(path: Path) -> ParseError:
    with open(path) as fh:
        fh.readline()
        for row_no, line in enumerate(fh, start=1):
            cells = line.strip().split(",")
            if len(cells) != 2:
                return ParseError(f"{path}: row {row_no} has {len(cells)} cells, expected 2")
            for cell in cells:
                try:
                    v = float(cell)
                except ValueError:
                    return ParseError(f"{path}: row {row_no}: non-numeric cell {cell!r}")
                if not math.isfinite(v):
                    return ParseError(f"{path}: row {row_no}: non-finite cell {cell!r}")
    return ParseError(f"{path}: unreadable")


def read_record_csv(path, subject_id: str, segment: str, fs: float) -> SignalRecord:
    """Read a two-column ``ecg,icg`` CSV. Row numbers in errors exclude the header."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"missing recording file: {path}")
    with open(path) as fh:
        header = fh.readline().strip().replace(" ", "")
    if header != "ecg,icg":
        raise ParseError(f"{path}: header must be 'ecg,icg', got {header!r}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError:
        raise _scan_for_bad_row(path) from None
    if data.shape[1] != 2 or not np.all(np.isfinite(data)):
        raise _scan_for_bad_row(path)
    return SignalRecord(subject_id, segment, fs, data[:, 0].copy(), data[:, 1].copy())


def write_record_csv(rec: SignalRecord, path) -> None:
    np.savetxt(path, np.column_stack([rec.ecg, rec.icg]), delimiter=",",
               header="ecg,icg", comments="", fmt="%.17g")


def load_dataset(manifest: DatasetManifest) -> list[SignalRecord]:
    return [
        read_record_csv(manifest.resolve(e), e.subject_id, e.segment, e.fs)
        for e in manifest.entries
    ]


def save_dataset(records: list[SignalRecord], directory) -> DatasetManifest:
    """Write records as CSV files plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        name = f"{rec.subject_id}_{rec.segment}.csv"
        write_record_csv(rec, directory / name)
        entries.append(ManifestEntry(rec.subject_id, rec.segment, Path(name), rec.fs))
    manifest = DatasetManifest(entries, root=directory)
    manifest.to_json(directory / "manifest.json")
    return manifest


# --- synthetic cohort -------------------------------------------------------

def _gauss(t, center, sigma):
    return np.exp(-0.5 * ((t - center) / sigma) ** 2)


def _hann_rise(t, start, stop):
    out = np.zeros_like(t)
    m = (t >= start) & (t < stop)
    out[m] = 0.5 * (1.0 - np.cos(np.pi * (t[m] - start) / (stop - start)))
    return out


def _hann_fall(t, start, stop):
    out = np.zeros_like(t)
    m = (t >= start) & (t <= stop)
    out[m] = 0.5 * (1.0 + np.cos(np.pi * (t[m] - start) / (stop - start)))
    return out


def _hann_bump(t, center, half_width):
    out = np.zeros_like(t)
    m = np.abs(t - center) <= half_width
    out[m] = 0.5 * (1.0 + np.cos(np.pi * (t[m] - center) / half_width))
    return out


def _draw_subject(rng: np.random.Generator) -> dict[str, float]:
    u = rng.uniform
    return {
        "rr": u(0.75, 1.05),
        "p_amp": u(0.08, 0.20), "p_off": -u(0.14, 0.17), "p_half": u(0.025, 0.04),
        "q_amp": u(0.15, 0.35), "q_off": -u(0.032, 0.045), "q_sigma": u(0.007, 0.010),
        "r_amp": u(0.8, 1.6), "r_sigma": u(0.008, 0.012),
        "s_amp": u(0.15, 0.5), "s_off": u(0.032, 0.050), "s_sigma": u(0.007, 0.011),
        "t_amp": u(0.15, 0.45), "t_peak": u(0.22, 0.30),
        "t_rise": u(0.08, 0.13), "t_fall": u(0.06, 0.10),
        "rc": u(0.09, 0.14), "c_rise": u(0.045, 0.075), "c_amp": u(1.0, 2.5),
        "c_fall": u(0.07, 0.11), "x_off": u(0.17, 0.24), "x_half": u(0.02, 0.035),
        "x_amp": u(0.3, 0.9),
        # emotion response, applied to the Anger segment scaled by emotion_strength
        "emo_rr": u(0.03, 0.08), "emo_t_amp": u(0.0, 0.15), "emo_rc": u(0.0, 0.008),
        "emo_c_amp": u(0.0, 0.10), "emo_x_off": u(0.0, 0.010),
    }


def _segment_params(p: dict[str, float], segment: str, strength: float) -> dict[str, float]:
    q = dict(p)
    if segment == "Anger" and strength:
        q["rr"] *= 1.0 - strength * p["emo_rr"]
        q["t_amp"] *= 1.0 - strength * p["emo_t_amp"]
        q["rc"] -= strength * p["emo_rc"]
        q["c_amp"] *= 1.0 + strength * p["emo_c_amp"]
        q["x_off"] -= strength * p["emo_x_off"]
    return q


def _synth_record(p, n_beats, fs, rng, snr_db):
    rr = p["rr"] * (1.0 + 0.03 * rng.standard_normal(n_beats))
    lead = 1.0
    beat_t = lead + np.concatenate([[0.0], np.cumsum(rr[:-1])])
    r_idx = np.round(beat_t * fs).astype(int)
    n = int(r_idx[-1] + round(1.0 * fs))
    t_all = np.arange(n) / fs
    ecg = np.zeros(n)
    icg = np.zeros(n)

    names = ("Q", "S", "T1", "T", "T2", "B", "C", "X")
    offsets = {k: np.empty(n_beats) for k in names}
    half = int(round(0.6 * fs))
    for i, r in enumerate(r_idx):
        lo, hi = max(0, r - half), min(n, r + half)
        t = t_all[lo:hi] - r / fs
        k = math.sqrt(rr[i] / p["rr"])
        a_ecg = 1.0 + 0.03 * rng.standard_normal()
        a_icg = 1.0 + 0.03 * rng.standard_normal()

        t_peak = p["t_peak"] * k
        t1, t2 = t_peak - p["t_rise"] * k, t_peak + p["t_fall"] * k
        beat = (
            p["p_amp"] * _hann_bump(t, p["p_off"], p["p_half"])
            - p["q_amp"] * _gauss(t, p["q_off"], p["q_sigma"])
            + p["r_amp"] * _gauss(t, 0.0, p["r_sigma"])
            - p["s_amp"] * _gauss(t, p["s_off"], p["s_sigma"])
            + p["t_amp"] * (_hann_rise(t, t1, t_peak) + _hann_fall(t, t_peak, t2))
        )
        ecg[lo:hi] += a_ecg * beat

        c = p["rc"] + 0.002 * rng.standard_normal()
        b = c - p["c_rise"]
        x = c + p["x_off"] * k
        wave = (
            p["c_amp"] * (_hann_rise(t, b, c) + _hann_fall(t, c, c + p["c_fall"]))
            - p["x_amp"] * _hann_bump(t, x, p["x_half"])
        )
        icg[lo:hi] += a_icg * wave

        for key, val in zip(names, (p["q_off"], p["s_off"], t1, t_peak, t2, b, c, x)):
            offsets[key][i] = val

    if snr_db is not None and math.isfinite(snr_db):
        for sig in (ecg, icg):
            sigma = np.sqrt(np.mean(sig ** 2)) / 10 ** (snr_db / 20.0)
            sig += sigma * rng.standard_normal(n)
    return ecg, icg, r_idx, offsets


def generate_synthetic_cohort(
    n_subjects: int,
    beats_per_segment: int = 90,
    fs: float = 1000.0,
    seed: int = 0,
    snr_db: float | None = 20.0,
    emotion_strength: float = 1.0,
) -> tuple[list[SignalRecord], list[SyntheticGroundTruth]]:
    """Generate Baseline and Anger records for ``n_subjects`` synthetic subjects.

    ECG beats are sums of Gaussian (Q, R, S) and raised-cosine (P, T) waves; the
    ICG beat is a B-C-X complex locked to R through a subject-specific R-C
    latency. Two guard beats are added so that ``beats_per_segment`` beats have
    complete 750 ms windows. ``snr_db=None`` disables noise;
    ``emotion_strength=0`` makes both segments statistically identical.
    """
    if n_subjects < 2:
        raise ConfigError("need at least 2 subjects")
    if beats_per_segment < 90:
        raise ConfigError(
            f"beats_per_segment={beats_per_segment} cannot form 9 cohorts of 10 beats")
    if fs < 250:
        raise ConfigError(f"fs={fs} too low; need >= 250 Hz")
    records, truths = [], []
    width = max(3, len(str(n_subjects)))
    for s in range(n_subjects):
        params = _draw_subject(np.random.default_rng([seed, s]))
        sid = f"S{s + 1:0{width}d}"
        for g, segment in enumerate(SEGMENTS):
            p = _segment_params(params, segment, emotion_strength)
            rng = np.random.default_rng([seed, s, g + 1])
            ecg, icg, r_idx, offs = _synth_record(p, beats_per_segment + 2, fs, rng, snr_db)
            records.append(SignalRecord(sid, segment, fs, ecg, icg))
            truths.append(SyntheticGroundTruth(r_idx, offs, p))
    return records, truths


# --- splits -----------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-12))


def stratified_split(matrix: FeatureMatrix, test_ratio: float = 0.33, seed: int = 0):
    """Split per subject: ``round(test_ratio * n)`` rows (ties up) go to test.

    Returns ``(train, test, train_rows, test_rows)`` with row indices into
    ``matrix`` in ascending order.
    """
    if not 0.0 < test_ratio < 1.0:
        raise ConfigError(f"test_ratio must be in (0, 1), got {test_ratio}")
    rng = np.random.default_rng(seed)
    test_rows = []
    for subject in sorted(set(matrix.subjects)):
        rows = np.flatnonzero(matrix.subjects == subject)
        n_test = _round_half_up(test_ratio * len(rows))
        if n_test < 1 or n_test >= len(rows):
            raise SplitError(
                f"subject {subject} has {len(rows)} rows; cannot fill both partitions")
        test_rows.extend(rng.permutation(rows)[:n_test])
    test_rows = np.sort(np.asarray(test_rows, dtype=int))
    train_rows = np.setdiff1d(np.arange(len(matrix)), test_rows)
    return matrix.take(train_rows), matrix.take(test_rows), train_rows, test_rows
