"""Labeled feature matrix container and its CSV format."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FeatureError, ParseError

FEATURE_NAMES: tuple[str, ...] = (
    "RR_int", "QRS_int", "T_int", "QT_int", "ST_int",
    "RQ_amp", "RS_amp", "RT_amp", "TT1_amp", "TT2_amp",
    "QR_slope", "RS_slope", "TT1_slope", "TT2_slope",
    "ECGQRScrest", "ECGTcrest",
    "BX_int", "CB_amp", "CX_amp", "CB_slope", "CX_slope", "ICGcrest",
    "RC_int", "QX_int", "QB_int", "SX_int", "SB_int", "BT_int", "TX_int",
)

LABEL_COLUMNS = ("subject", "segment", "cohort")


@dataclass
class FeatureMatrix:
    """Rows are template averages; columns are named features.

    ``subjects`` is the class label for identification, ``segments`` the
    emotional segment and ``cohorts`` the averaging-cohort index.
    """

    values: np.ndarray
    subjects: np.ndarray
    segments: np.ndarray
    cohorts: np.ndarray
    names: tuple[str, ...] = field(default=FEATURE_NAMES)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            self.values = self.values.reshape(len(self.values), -1)
        self.names = tuple(self.names)
        self.subjects = np.asarray(self.subjects, dtype=object)
        self.segments = np.asarray(self.segments, dtype=object)
        self.cohorts = np.asarray(self.cohorts, dtype=int)
        n, d = self.values.shape
        if len(set(self.names)) != len(self.names):
            raise FeatureError("duplicate column names")
        if d != len(self.names):
            raise FeatureError(f"{d} value columns but {len(self.names)} names")
        for label in (self.subjects, self.segments, self.cohorts):
            if len(label) != n:
                raise FeatureError("label length does not match row count")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return len(self.names)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(
            self.values[rows], self.subjects[rows], self.segments[rows],
            self.cohorts[rows], self.names,
        )

    def select(self, names: Iterable[str]) -> "FeatureMatrix":
        """Copy holding only the named columns, in the original column order."""
        wanted = set(names)
        unknown = wanted - set(self.names)
        if unknown:
            raise FeatureError(f"unknown feature(s): {sorted(unknown)}")
        cols = [i for i, n in enumerate(self.names) if n in wanted]
        return FeatureMatrix(
            self.values[:, cols], self.subjects.copy(), self.segments.copy(),
            self.cohorts.copy(), tuple(self.names[i] for i in cols),
        )

    def segment(self, name: str) -> "FeatureMatrix":
        return self.take(np.flatnonzero(self.segments == name))

    def with_values(self, values: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(values, self.subjects, self.segments, self.cohorts, self.names)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LABEL_COLUMNS + self.names)
            for i in range(len(self)):
                w.writerow(
                    [self.subjects[i], self.segments[i], int(self.cohorts[i])]
                    + [repr(float(v)) for v in self.values[i]]
                )

    @classmethod
    def from_csv(cls, path) -> "FeatureMatrix":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0][:3]) != LABEL_COLUMNS:
            raise ParseError(f"{path}: header must start with {','.join(LABEL_COLUMNS)}")
        names = tuple(rows[0][3:])
        subjects, segments, cohorts, values = [], [], [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(names) + 3:
                raise ParseError(f"{path}: row {lineno} has {len(row)} cells")
            try:
                cohorts.append(int(row[2]))
                values.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise ParseError(f"{path}: row {lineno}: {exc}") from None
            subjects.append(row[0])
            segments.append(row[1])
        values = np.asarray(values, dtype=float).reshape(len(values), len(names))
        return cls(values, subjects, segments, cohorts, names)


def concat(matrices: Sequence[FeatureMatrix]) -> FeatureMatrix:
    names = matrices[0].names
    if any(m.names != names for m in matrices):
        raise FeatureError("cannot concatenate matrices with different columns")
    return FeatureMatrix(
        np.vstack([m.values for m in matrices]),
        np.concatenate([m.subjects for m in matrices]),
        np.concatenate([m.segments for m in matrices]),
        np.concatenate([m.cohorts for m in matrices]),
        names,
    )
