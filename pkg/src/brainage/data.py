"""Subject time series, sample covariances and subject-level splits."""

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

SPLITS = ("train", "validation", "test")


class DataError(Exception):
    """Base class for ingestion and splitting failures."""


class IngestionError(DataError):
    pass


class DimensionMismatchError(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):
    pass


class InsufficientDataError(DataError, ValueError):
    pass


class SplitConfigError(DataError, ValueError):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    timeseries: np.ndarray
    age: Optional[float] = None
    covariance: Optional[np.ndarray] = None

    @property
    def n(self):
        return self.timeseries.shape[0]

    @property
    def p(self):
        return self.timeseries.shape[1]


@dataclass(frozen=True)
class CohortDataset:
    subjects: Tuple[SubjectRecord, ...]
    p: int
    split_labels: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    def __len__(self):
        return len(self.subjects)

    @property
    def ids(self):
        return [s.subject_id for s in self.subjects]

    def by_id(self, subject_id):
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def split(self, label):
        """Subjects carrying ``label``, in cohort order."""
        return [s for s in self.subjects if self.split_labels.get(s.subject_id) == label]

    def with_covariances(self):
        return replace(self, subjects=tuple(ensure_covariance(s) for s in self.subjects))

    def covariance_triples(self, label=None):
        """``(subject_id, K, n)`` for every subject (or one split)."""
        subjects = self.subjects if label is None else self.split(label)
        out = []
        for s in subjects:
            K = s.covariance if s.covariance is not None else compute_covariance(s)
            out.append((s.subject_id, K, s.n))
        return out


def make_cohort(subjects, split_labels=None):
    subjects = list(subjects)
    if not subjects:
        raise IngestionError("cohort has no subjects")
    first = subjects[0]
    seen = set()
    for s in subjects:
        if s.subject_id in seen:
            raise IngestionError(f"duplicate subject id {s.subject_id!r}")
        seen.add(s.subject_id)
        if s.p != first.p:
            raise DimensionMismatchError(
                f"subject {s.subject_id!r} has p={s.p} but subject {first.subject_id!r} has p={first.p}"
            )
    return CohortDataset(tuple(subjects), first.p, dict(split_labels or {}))


def compute_covariance(record):
    """Maximum-likelihood covariance (1/n normalizer) of column-centered data."""
    X = np.asarray(record.timeseries if isinstance(record, SubjectRecord) else record, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        sid = getattr(record, "subject_id", "?")
        raise InsufficientDataError(f"subject {sid!r} needs at least 2 time points")
    Xc = X - X.mean(axis=0)
    K = Xc.T @ Xc / X.shape[0]
    return 0.5 * (K + K.T)


def ensure_covariance(record):
    if record.covariance is not None:
        return record
    return replace(record, covariance=compute_covariance(record))


# ---------------------------------------------------------------------------
# ingestion


def _read_matrix(path):
    rows = []
    with open(path, newline="") as fh:
        for r, line in enumerate(csv.reader(fh), start=1):
            if not line or all(not c.strip() for c in line):
                continue
            row = []
            for c, cell in enumerate(line, start=1):
                try:
                    val = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
                row.append(val)
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: empty matrix")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ParseError(f"{path}: ragged rows")
    return np.array(rows)


def _parse_age(text, where):
    text = (text or "").strip()
    if not text:
        return None
    try:
        age = float(text)
    except ValueError:
        raise ParseError(f"{where}: non-numeric age {text!r}") from None
    if not age >= 0:
        raise ParseError(f"{where}: negative age {age}")
    return age


def _load_csv_dir(path):
    path = Path(path)
    manifest = path / "manifest.csv"
    if not manifest.is_file():
        raise IngestionError(f"missing manifest file {manifest}")
    subjects = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "subject_id" not in reader.fieldnames:
            raise IngestionError(f"{manifest}: header must contain subject_id,age")
        for line_no, row in enumerate(reader, start=2):
            sid = row["subject_id"].strip()
            age = _parse_age(row.get("age"), f"{manifest}:{line_no}")
            matrix_path = path / f"{sid}.csv"
            if not matrix_path.is_file():
                raise IngestionError(f"missing time-series file {matrix_path} for subject {sid!r}")
            subjects.append(SubjectRecord(sid, _read_matrix(matrix_path), age))
    return make_cohort(subjects)


def _load_single_table(path):
    path = Path(path)
    series: Dict[str, Dict[int, List[float]]] = {}
    ages: Dict[str, Optional[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["subject_id", "time_index"]:
            raise IngestionError(f"{path}: header must start with subject_id,time_index")
        has_age = len(header) > 2 and header[2] == "age"
        first_region = 3 if has_age else 2
        for r, line in enumerate(reader, start=2):
            if not line:
                continue
            sid = line[0].strip()
            try:
                t = int(line[1])
            except ValueError:
                raise ParseError(f"{path}: non-integer time_index at row {r}, column 2") from None
            vals = []
            for c, cell in enumerate(line[first_region:], start=first_region + 1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
            series.setdefault(sid, {})[t] = vals
            if has_age:
                age = _parse_age(line[2], f"{path}:{r}")
                if age is not None:
                    ages[sid] = age
            ages.setdefault(sid, None)
    subjects = []
    for sid, rows in series.items():
        X = np.array([rows[t] for t in sorted(rows)])
        subjects.append(SubjectRecord(sid, X, ages.get(sid)))
    return make_cohort(subjects)


def load_cohort(path, format="csv_dir"):
    """Read a cohort from disk.

    ``csv_dir``: ``<subject_id>.csv`` matrices (time x region, no header) plus
    ``manifest.csv`` with header ``subject_id,age``; an empty age marks a
    prediction-only subject. ``single_table``: one long-format file with
    columns ``subject_id,time_index[,age],region...``.
    """
    if not os.path.exists(path):
        raise IngestionError(f"path does not exist: {path}")
    if format == "csv_dir":
        return _load_csv_dir(path)
    if format == "single_table":
        return _load_single_table(path)
    raise IngestionError(f"unknown cohort format {format!r}")


def write_cohort(cohort, path):
    """Write a cohort in ``csv_dir`` layout."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "age"])
        for s in cohort.subjects:
            writer.writerow([s.subject_id, "" if s.age is None else repr(float(s.age))])
    for s in cohort.subjects:
        np.savetxt(path / f"{s.subject_id}.csv", s.timeseries, delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# splitting


def _split_key(subject_id, seed):
    digest = hashlib.sha256(f"{int(seed)}:{subject_id}".encode()).digest()
    return digest


def split_counts(n_subjects, fractions):
    _, f_val, f_test = fractions
    n_val = max(1, int(round(f_val * n_subjects)))
    n_test = max(1, int(round(f_test * n_subjects)))
    n_train = n_subjects - n_val - n_test
    if n_train < 1:
        raise SplitConfigError(f"fractions {fractions} leave no training subjects out of {n_subjects}")
    return n_train, n_val, n_test


def split_cohort(cohort, fractions=(0.6, 0.2, 0.2), seed=0):
    """Assign every subject to exactly one of train/validation/test.

    Subjects are ordered by a hash of (seed, subject_id), so the partition
    does not depend on the order subjects were listed in. Validation and test
    sizes are the rounded fractions; the remainder goes to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(not f > 0 for f in fractions):
        raise SplitConfigError("fractions must be three positive numbers")
    if not math.isclose(sum(fractions), 1.0, rel_tol=0.0, abs_tol=1e-9):
        raise SplitConfigError(f"fractions must sum to 1 (got {sum(fractions)!r})")
    if len(cohort) < 3:
        raise SplitConfigError("splitting needs at least 3 subjects")
    n_train, n_val, _ = split_counts(len(cohort), fractions)
    order = sorted(cohort.ids, key=lambda sid: _split_key(sid, seed))
    labels = {}
    for rank, sid in enumerate(order):
        if rank < n_train:
            labels[sid] = "train"
        elif rank < n_train + n_val:
            labels[sid] = "validation"
        else:
            labels[sid] = "test"
    return replace(cohort, split_labels=labels)
