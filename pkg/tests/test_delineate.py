import numpy as np
import pytest

from cardiokit.delineate import (FiducialMap, TemplatePair, delineate_ecg_template, delineate_icg_template,
                                 delineate_template, detect_c_points, detect_r_peaks, dump_template,
                                 ensemble_average, load_template)
from cardiokit.dsp import preprocess_record
from cardiokit.errors import ConfigError, DelineationError, InsufficientDataError
from cardiokit.ingest import SignalRecord, generate_synthetic_cohort
from oracles import fiducial_errors


@pytest.fixture(scope="module")
def clean():
    recs, truths = generate_synthetic_cohort(3, 90, 1000.0, seed=11, snr_db=None)
    return [preprocess_record(r) for r in recs], truths


def test_r_peaks_match_truth(clean):
    recs, truths = clean
    for rec, gt in zip(recs, truths):
        r = detect_r_peaks(rec.ecg, rec.fs)
        assert len(r) == len(gt.r_times)
        assert np.max(np.abs(r - gt.r_times)) <= 10


def test_r_peaks_are_local_maxima(clean):
    rec = clean[0][0]
    r = detect_r_peaks(rec.ecg, rec.fs)
    assert np.all(np.diff(r) >= 200)
    for p in r:
        assert p - 30 + np.argmax(rec.ecg[p - 30:p + 31]) == p


def test_flat_signal_has_no_peaks():
    assert len(detect_r_peaks(np.zeros(20000), 1000.0)) == 0


def test_low_fs_rejected():
    with pytest.raises(ConfigError):
        detect_r_peaks(np.zeros(5000), 100.0)


def test_c_points_match_truth(clean):
    recs, truths = clean
    for rec, gt in zip(recs, truths):
        r = detect_r_peaks(rec.ecg, rec.fs)
        c = detect_c_points(rec.icg, r)
        true_c = gt.r_times[:-1] + np.round(gt.fiducial_offsets["C"][:-1] * rec.fs)
        assert np.max(np.abs(c - true_c)) <= 10


def test_c_points_of_repeated_bump():
    r = np.arange(10) * 800 + 100
    icg = np.zeros(8000)
    bump = np.exp(-0.5 * ((np.arange(200) - 80) / 20.0) ** 2)
    for p in r[:-1]:
        icg[p + 50:p + 250] += bump
    c = detect_c_points(icg, r)
    assert len(c) == 9
    assert np.array_equal(c, r[:-1] + 130)


def test_c_points_need_two_peaks():
    with pytest.raises(DelineationError):
        detect_c_points(np.zeros(100), [10])


def _repeated_beats(n_beats, fs, sigma, seed):
    """Identical beats every 800 ms; returns the record, R indices and the clean beat."""
    period = int(0.8 * fs)
    t = np.arange(period) / fs
    beat = np.exp(-0.5 * ((t - 0.3) / 0.01) ** 2) + 0.3 * np.exp(-0.5 * ((t - 0.6) / 0.04) ** 2)
    clean = np.tile(beat, n_beats)
    rng = np.random.default_rng(seed)
    ecg = clean + sigma * rng.standard_normal(len(clean))
    r = np.arange(n_beats) * period + int(0.3 * fs)
    rec = SignalRecord("S1", "Baseline", fs, ecg, ecg.copy())
    return rec, r, clean


def test_averaging_reduces_noise_by_sqrt10():
    fs, sigma = 500.0, 0.05
    ratios = []
    for seed in range(50):
        rec, r, clean = _repeated_beats(100, fs, sigma, seed)
        tps = ensemble_average(rec, r, r[:-1] + 50)
        ref = clean[r[1] - 125:r[1] + 250]
        resid = np.concatenate([tp.ecg_tpl - ref for tp in tps])
        ratios.append(np.sqrt(np.mean(resid ** 2)) / (sigma / np.sqrt(10)))
    assert abs(np.mean(ratios) - 1.0) <= 0.3


def test_residual_shrinks_with_cohort_size():
    fs, sigma = 500.0, 0.05
    rec, r, clean = _repeated_beats(100, fs, sigma, 0)
    win = np.arange(375) - 125
    rms = []
    for size in (1, 2, 5, 10):
        tpl = rec.ecg[r[1:1 + size][:, None] + win].mean(axis=0)
        rms.append(np.sqrt(np.mean((tpl - clean[r[1] + win]) ** 2)))
    assert all(a > b for a, b in zip(rms, rms[1:]))


def test_cohort_partition_and_anchor():
    fs = 500.0
    rec, r, _ = _repeated_beats(92, fs, 0.0, 0)
    tps = ensemble_average(rec, r, r[:-1] + 50)
    assert [tp.cohort_index for tp in tps] == list(range(9))
    # cohort 0 holds beats 0..9
    assert np.allclose(tps[0].ecg_tpl, rec.ecg[r[0] - 125:r[0] + 250])
    assert np.allclose(tps[8].ecg_tpl, rec.ecg[r[80] - 125:r[80] + 250])
    for tp in tps:
        assert len(tp.ecg_tpl) == 375
        assert np.argmax(tp.ecg_tpl) == tp.anchor
        assert tp.rr_mean == pytest.approx(0.8)


def test_too_few_beats():
    rec, r, _ = _repeated_beats(60, 500.0, 0.0, 0)
    with pytest.raises(InsufficientDataError, match="59 usable beats"):
        ensemble_average(rec, r, r[:-1] + 50)


def test_template_pair_invariants():
    with pytest.raises(DelineationError):
        TemplatePair(np.zeros(10), np.zeros(10), 0.8, 0.1, 0, 1000.0)
    with pytest.raises(DelineationError):
        TemplatePair(np.zeros(750), np.zeros(750), 2.5, 0.1, 0, 1000.0)


@pytest.mark.parametrize("fs", [500.0, 1000.0, 2000.0])
def test_noise_free_fiducials_within_15ms(fs):
    res = fiducial_errors(1, n_subjects=2, fs=fs)
    for err, flags in res:
        assert not flags
        assert max(abs(v) for v in err.values()) <= 15.0, err


def _gauss(t, mu, sd):
    return np.exp(-0.5 * ((t - mu) / sd) ** 2)


def test_symmetric_t_wave():
    fs = 1000.0
    t = np.arange(750) / fs
    tpl = (-0.1 * _gauss(t, 0.225, 0.006) + _gauss(t, 0.25, 0.008) - 0.2 * _gauss(t, 0.28, 0.007)
           + 0.3 * _gauss(t, 0.52, 0.04))
    pts, flags = delineate_ecg_template(tpl, fs)
    assert not flags
    assert abs((pts["T"] - pts["T1"]) - (pts["T2"] - pts["T"])) <= 2


def test_missing_s_trough_is_flagged():
    fs = 1000.0
    t = np.arange(750) / fs
    # decline lasting past the S window: the argmin lands on the window edge
    tpl = (-0.1 * _gauss(t, 0.225, 0.006) + _gauss(t, 0.25, 0.008)
           - 2.0 * (np.clip(t, 0.25, 0.4) - 0.25) + 0.3 * _gauss(t, 0.6, 0.04))
    pts, flags = delineate_ecg_template(tpl, fs)
    assert pts["S"] == 350
    assert "S" in flags


def test_icg_x_is_post_c_minimum():
    fs = 1000.0
    t = np.arange(750) / fs
    tpl = -0.2 * _gauss(t, 0.17, 0.02) + _gauss(t, 0.25, 0.03) - 0.5 * _gauss(t, 0.40, 0.025)
    pts, _ = delineate_icg_template(tpl, fs)
    assert pts["C"] == 250
    assert pts["X"] == 251 + np.argmin(tpl[251:551])
    assert pts["B"] < pts["C"] < pts["X"]


def test_ordering_enforced():
    with pytest.raises(DelineationError):
        FiducialMap({"Q": 5, "R": 4, "S": 6, "T1": 7, "T": 8, "T2": 9}, {"B": 1, "C": 2, "X": 3})
    with pytest.raises(DelineationError):
        FiducialMap({"Q": 1, "R": 2, "S": 3, "T1": 4, "T": 5, "T2": 6}, {"B": 3, "C": 2, "X": 4})


def test_every_emitted_map_is_ordered(cohort6):
    rec = preprocess_record(cohort6[0][0])
    r = detect_r_peaks(rec.ecg, rec.fs)
    for tp in ensemble_average(rec, r, detect_c_points(rec.icg, r)):
        fm = delineate_template(tp)
        e, i = fm.ecg, fm.icg
        assert e["Q"] < e["R"] < e["S"] < e["T1"] < e["T"] < e["T2"] and i["B"] < i["C"] < i["X"]


def test_dump_load_round_trip(tmp_path, cohort6):
    rec = preprocess_record(cohort6[0][1])
    r = detect_r_peaks(rec.ecg, rec.fs)
    tp = ensemble_average(rec, r, detect_c_points(rec.icg, r))[4]
    fm = delineate_template(tp)
    dump_template(tp, fm, tmp_path, "t4")
    tp2, fm2 = load_template(tmp_path, "t4")
    assert np.array_equal(tp.ecg_tpl, tp2.ecg_tpl) and np.array_equal(tp.icg_tpl, tp2.icg_tpl)
    assert (tp.rr_mean, tp.rc_mean, tp.cohort_index) == (tp2.rr_mean, tp2.rc_mean, tp2.cohort_index)
    assert fm2.to_json() == fm.to_json()
