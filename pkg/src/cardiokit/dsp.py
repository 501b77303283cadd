"""Butterworth band-pass design and zero-phase filtering."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .errors import DataError, DesignError, LengthError
from .ingest import SignalRecord

ECG_BAND = (1.0, 40.0)
ICG_BAND = (0.5, 40.0)
FILTER_ORDER = 4


@dataclass(frozen=True)
class IirFilter:
    """Cascade of second-order sections, rows ``(b0, b1, b2, 1, a1, a2)``."""

    sos: np.ndarray
    order: int
    lo_hz: float
    hi_hz: float
    fs: float

    @property
    def sections(self) -> list[tuple[float, float, float, float, float]]:
        return [(s[0], s[1], s[2], s[4], s[5]) for s in self.sos]

    @property
    def padlen(self) -> int:
        return 3 * (2 * self.order + 1)

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, s[4], s[5]]) for s in self.sos])

    def response(self, freqs_hz) -> np.ndarray:
        """Complex single-pass response at ``freqs_hz`` evaluated from the sections."""
        z1 = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=float) / self.fs)
        h = np.ones_like(z1)
        for b0, b1, b2, _, a1, a2 in self.sos:
            h *= (b0 + b1 * z1 + b2 * z1 ** 2) / (1.0 + a1 * z1 + a2 * z1 ** 2)
        return h


@lru_cache(maxsize=32)
def design_butterworth_bandpass(order: int, lo_hz: float, hi_hz: float, fs: float) -> IirFilter:
    """Band-pass from an ``order``-pole analog Butterworth prototype.

    The prototype is band-transformed and mapped with the pre-warped bilinear
    transform, so the band-pass itself has ``2 * order`` poles.
    """
    if order < 1:
        raise DesignError(f"order must be >= 1, got {order}")
    if not 0.0 < lo_hz < hi_hz < fs / 2.0:
        raise DesignError(f"need 0 < lo ({lo_hz}) < hi ({hi_hz}) < fs/2 ({fs / 2})")
    sos = signal.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=fs, output="sos")
    filt = IirFilter(np.asarray(sos, dtype=float), int(order), float(lo_hz), float(hi_hz), float(fs))
    if np.any(np.abs(filt.poles()) >= 1.0):
        raise DesignError("designed filter is unstable")
    return filt


def _odd_extend(x: np.ndarray, n: int) -> np.ndarray:
    head = 2.0 * x[0] - x[n:0:-1]
    tail = 2.0 * x[-1] - x[-2:-(n + 2):-1]
    return np.concatenate([head, x, tail])


def filtfilt(filt: IirFilter, x) -> np.ndarray:
    """Forward-backward filtering with odd-reflection padding; zero phase, |H|^2."""
    x = np.asarray(x, dtype=float)
    n = filt.padlen
    if x.ndim != 1 or len(x) <= n:
        raise LengthError(f"input of length {len(x)} too short; need more than {n} samples")
    if not np.all(np.isfinite(x)):
        raise DataError("input contains non-finite samples")
    ext = _odd_extend(x, n)
    zi = signal.sosfilt_zi(filt.sos)
    y, _ = signal.sosfilt(filt.sos, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = signal.sosfilt(filt.sos, y, zi=zi * y[0])
    return y[::-1][n:-n].copy()


def preprocess_record(rec: SignalRecord, ecg_band=ECG_BAND, icg_band=ICG_BAND,
                      order: int = FILTER_ORDER) -> SignalRecord:
    ecg_f = design_butterworth_bandpass(order, float(ecg_band[0]), float(ecg_band[1]), float(rec.fs))
    icg_f = design_butterworth_bandpass(order, float(icg_band[0]), float(icg_band[1]), float(rec.fs))
    return rec.replace(ecg=filtfilt(ecg_f, rec.ecg), icg=filtfilt(icg_f, rec.icg))
