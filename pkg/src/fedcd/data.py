"""Response logs, Q-matrices, ingestion, filtering, splitting and synthetic data.

Logs are held column-wise in :class:`Responses` (three aligned integer arrays)
rather than as a list of record objects; iterating a ``Responses`` yields
:class:`ResponseLog` tuples when a record view is needed.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

LOG_COLUMNS = ("school_id", "student_id", "exercise_id", "correct")
QMATRIX_COLUMNS = ("exercise_id", "concept_ids")
LATENT_COLUMNS = ("student_id", "concept_id", "mastery")


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class ResponseLog(NamedTuple):
    student: int
    exercise: int
    correct: int


@dataclass(frozen=True)
class Responses:
    """Column-oriented collection of response logs."""

    student: np.ndarray
    exercise: np.ndarray
    correct: np.ndarray

    def __post_init__(self):
        for name in ("student", "exercise", "correct"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.student) == len(self.exercise) == len(self.correct)):
            raise DataError("student, exercise and correct columns differ in length")

    @classmethod
    def from_records(cls, records: Sequence[Sequence[int]]) -> "Responses":
        arr = np.asarray(records, dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    @classmethod
    def empty(cls) -> "Responses":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z)

    def __len__(self) -> int:
        return len(self.student)

    def __iter__(self) -> Iterator[ResponseLog]:
        for s, e, c in zip(self.student.tolist(), self.exercise.tolist(), self.correct.tolist()):
            yield ResponseLog(s, e, c)

    def __eq__(self, other):
        if not isinstance(other, Responses):
            return NotImplemented
        return (
            np.array_equal(self.student, other.student)
            and np.array_equal(self.exercise, other.exercise)
            and np.array_equal(self.correct, other.correct)
        )

    def take(self, index) -> "Responses":
        return Responses(self.student[index], self.exercise[index], self.correct[index])

    def concat(self, other: "Responses") -> "Responses":
        return Responses(
            np.concatenate([self.student, other.student]),
            np.concatenate([self.exercise, other.exercise]),
            np.concatenate([self.correct, other.correct]),
        )

    def as_array(self) -> np.ndarray:
        return np.stack([self.student, self.exercise, self.correct], axis=1)


@dataclass(frozen=True)
class EntityCatalog:
    """Sizes of the entity sets and the student -> school assignment.

    The ``*_ids`` tuples hold the external identifiers in dense-index order;
    they are only used to write data back out.
    """

    num_students: int
    num_exercises: int
    num_concepts: int
    num_schools: int
    student_to_school: np.ndarray
    student_ids: tuple = ()
    exercise_ids: tuple = ()
    concept_ids: tuple = ()
    school_ids: tuple = ()

    def __post_init__(self):
        s2s = np.asarray(self.student_to_school, dtype=np.int64)
        s2s.setflags(write=False)
        object.__setattr__(self, "student_to_school", s2s)
        if s2s.shape != (self.num_students,):
            raise DataError("student_to_school must have one entry per student")
        if self.num_students and (s2s.min() < 0 or s2s.max() >= self.num_schools):
            raise DataError("student_to_school entries out of range")
        if np.any(np.bincount(s2s, minlength=self.num_schools) == 0):
            raise DataError("every school must own at least one student")
        # Default labels are the dense indices themselves.
        for name, n in (
            ("student_ids", self.num_students),
            ("exercise_ids", self.num_exercises),
            ("concept_ids", self.num_concepts),
            ("school_ids", self.num_schools),
        ):
            ids = getattr(self, name)
            if not ids:
                object.__setattr__(self, name, tuple(str(i) for i in range(n)))
            elif len(ids) != n:
                raise DataError(f"{name} has {len(ids)} labels, expected {n}")

    def students_of(self, school: int) -> np.ndarray:
        return np.flatnonzero(self.student_to_school == school)


@dataclass(frozen=True)
class QMatrix:
    """Binary exercise x concept incidence matrix."""

    entries: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.entries)
        if q.ndim != 2:
            raise DataError("Q-matrix must be two-dimensional")
        if not np.isin(q, (0, 1)).all():
            raise DataError("Q-matrix entries must be 0 or 1")
        empty = np.flatnonzero(q.sum(axis=1) == 0)
        if len(empty):
            raise DataError(f"Q-matrix row {int(empty[0])} has no concept")
        q = q.astype(np.float64)
        q.setflags(write=False)
        object.__setattr__(self, "entries", q)

    @property
    def num_exercises(self) -> int:
        return self.entries.shape[0]

    @property
    def num_concepts(self) -> int:
        return self.entries.shape[1]

    def __eq__(self, other):
        if not isinstance(other, QMatrix):
            return NotImplemented
        return np.array_equal(self.entries, other.entries)


@dataclass(frozen=True)
class ClientDataset:
    """One school's private train/test logs.

    ``students`` lists the school's global student indices in ascending order;
    the position of a student in that array is its local index.
    """

    school: int
    students: np.ndarray
    train: Responses
    test: Responses

    def __post_init__(self):
        students = np.asarray(self.students, dtype=np.int64)
        students.setflags(write=False)
        object.__setattr__(self, "students", students)

    @property
    def num_students(self) -> int:
        return len(self.students)

    def local_index(self, global_students) -> np.ndarray:
        idx = np.searchsorted(self.students, global_students)
        idx = np.clip(idx, 0, max(len(self.students) - 1, 0))
        if len(self.students) == 0 or not np.array_equal(self.students[idx], global_students):
            raise DataError(f"student not owned by school {self.school}")
        return idx


class LoadedData(NamedTuple):
    catalog: EntityCatalog
    qmatrix: QMatrix
    logs: Responses
    dropped_rows: int = 0


# --------------------------------------------------------------------------
# ingestion


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        return source
    raise TypeError(f"unsupported source {source!r}")


def _read_table(source, columns, what):
    f = _open_text(source)
    try:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{what}: no records")
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{what}: header is missing column(s) {missing}")
        pos = [header.index(c) for c in columns]
        rows = []
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{what}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append((reader.line_num, [row[p].strip() for p in pos]))
        return rows
    finally:
        if f is not source:
            f.close()


def read_qmatrix(source) -> tuple[QMatrix, tuple, tuple]:
    """Read a Q-matrix file; returns (qmatrix, exercise_ids, concept_ids)."""
    rows = _read_table(source, QMATRIX_COLUMNS, "Q-matrix")
    if not rows:
        raise DataError("Q-matrix: no records")
    exercise_ids: dict[str, int] = {}
    concept_ids: dict[str, int] = {}
    incidence: list[tuple[int, list[int]]] = []
    for line, (ex, concepts) in rows:
        if not ex:
            raise DataError(f"Q-matrix: line {line}: empty exercise_id")
        if ex in exercise_ids:
            raise DataError(f"Q-matrix: line {line}: duplicate exercise_id {ex!r}")
        names = [c.strip() for c in concepts.split(";") if c.strip()]
        if not names:
            raise DataError(f"Q-matrix: line {line}: exercise {ex!r} has no concept")
        exercise_ids[ex] = len(exercise_ids)
        ks = [concept_ids.setdefault(c, len(concept_ids)) for c in names]
        incidence.append((exercise_ids[ex], ks))
    q = np.zeros((len(exercise_ids), len(concept_ids)), dtype=np.int8)
    for j, ks in incidence:
        q[j, ks] = 1
    return QMatrix(q), tuple(exercise_ids), tuple(concept_ids)


def ingest_logs(log_file, qmatrix_file) -> LoadedData:
    """Load a response-log file and its Q-matrix into dense indices.

    Rows with an empty field are dropped and counted. Exact duplicate
    (student, exercise, correct) rows are collapsed to one. Schools and
    students are numbered in order of first appearance; exercises follow the
    Q-matrix file order.
    """
    qmatrix, exercise_labels, concept_labels = read_qmatrix(qmatrix_file)
    exercise_index = {e: j for j, e in enumerate(exercise_labels)}

    rows = _read_table(log_file, LOG_COLUMNS, "log file")
    schools: dict[str, int] = {}
    students: dict[str, int] = {}
    owner: list[int] = []
    records = []
    seen = set()
    dropped = 0
    for line, (school, student, exercise, correct) in rows:
        if not (school and student and exercise and correct):
            dropped += 1
            continue
        if correct not in ("0", "1"):
            raise DataError(f"log file: line {line}: correct must be 0 or 1, got {correct!r}")
        if exercise not in exercise_index:
            raise DataError(f"log file: line {line}: exercise {exercise!r} is not in the Q-matrix")
        t = schools.setdefault(school, len(schools))
        if student not in students:
            students[student] = len(students)
            owner.append(t)
        elif owner[students[student]] != t:
            raise DataError(f"log file: line {line}: student {student!r} appears in two schools")
        rec = (students[student], exercise_index[exercise], int(correct))
        if rec in seen:
            continue
        seen.add(rec)
        records.append(rec)
    if not records:
        raise DataError("log file: no records")
    if dropped:
        log.info("dropped %d log rows with missing fields", dropped)
    catalog = EntityCatalog(
        num_students=len(students),
        num_exercises=qmatrix.num_exercises,
        num_concepts=qmatrix.num_concepts,
        num_schools=len(schools),
        student_to_school=np.asarray(owner),
        student_ids=tuple(students),
        exercise_ids=exercise_labels,
        concept_ids=concept_labels,
        school_ids=tuple(schools),
    )
    return LoadedData(catalog, qmatrix, Responses.from_records(records), dropped)


# --------------------------------------------------------------------------
# filtering


def filter_dataset(
    logs: Responses,
    catalog: EntityCatalog,
    min_student_logs: int = 5,
    min_school_logs: int = 1000,
) -> tuple[EntityCatalog, Responses]:
    """Drop sparse students, then sparse schools, until nothing changes.

    Surviving students and schools are renumbered densely, preserving their
    relative order. Exercises and concepts are left untouched.
    """
    if min_student_logs < 0 or min_school_logs < 0:
        raise ValueError("thresholds must be non-negative")
    keep = np.ones(len(logs), dtype=bool)
    s2s = catalog.student_to_school
    while True:
        per_student = np.bincount(logs.student[keep], minlength=catalog.num_students)
        bad_student = per_student < min_student_logs
        keep_next = keep & ~bad_student[logs.student]
        per_school = np.bincount(s2s[logs.student[keep_next]], minlength=catalog.num_schools)
        bad_school = per_school < min_school_logs
        keep_next &= ~bad_school[s2s[logs.student]]
        if np.array_equal(keep_next, keep):
            break
        keep = keep_next
    if not keep.any():
        raise DataError("filtering removed all data")

    kept = logs.take(keep)
    alive_students = np.unique(kept.student)
    alive_schools = np.unique(s2s[alive_students])
    student_map = np.full(catalog.num_students, -1, dtype=np.int64)
    student_map[alive_students] = np.arange(len(alive_students))
    school_map = np.full(catalog.num_schools, -1, dtype=np.int64)
    school_map[alive_schools] = np.arange(len(alive_schools))

    new_catalog = EntityCatalog(
        num_students=len(alive_students),
        num_exercises=catalog.num_exercises,
        num_concepts=catalog.num_concepts,
        num_schools=len(alive_schools),
        student_to_school=school_map[s2s[alive_students]],
        student_ids=tuple(catalog.student_ids[i] for i in alive_students),
        exercise_ids=catalog.exercise_ids,
        concept_ids=catalog.concept_ids,
        school_ids=tuple(catalog.school_ids[i] for i in alive_schools),
    )
    return new_catalog, Responses(student_map[kept.student], kept.exercise, kept.correct)


# --------------------------------------------------------------------------
# splitting


def split_client(
    logs: Responses,
    train_fraction: float,
    rng_seed,
    school: int = 0,
    students: np.ndarray | None = None,
) -> ClientDataset:
    """Per-student shuffled split of one client's logs.

    Attempts at the same (student, exercise) pair travel together so the two
    sides never share a pair. A student with ``n >= 2`` such units keeps
    ``clip(round(train_fraction * n), 1, n - 1)`` of them for training; a
    student with a single unit trains on it.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    pairs, unit = np.unique(
        np.stack([logs.student, logs.exercise], axis=1), axis=0, return_inverse=True
    )
    unit = unit.reshape(-1)
    unit_student = pairs[:, 0]
    is_train_unit = np.zeros(len(pairs), dtype=bool)
    # pairs are sorted by student, so each student's units are contiguous
    bounds = np.flatnonzero(np.diff(unit_student)) + 1
    for units in np.split(np.arange(len(pairs)), bounds):
        n = len(units)
        if n == 0:
            continue
        if n == 1:
            is_train_unit[units] = True
            continue
        n_train = int(np.floor(train_fraction * n + 0.5))
        n_train = min(max(n_train, 1), n - 1)
        is_train_unit[rng.permutation(units)[:n_train]] = True
    train_mask = is_train_unit[unit]
    if students is None:
        students = np.unique(logs.student)
    return ClientDataset(
        school=school,
        students=students,
        train=logs.take(train_mask),
        test=logs.take(~train_mask),
    )


def split_clients(
    logs: Responses, catalog: EntityCatalog, train_fraction: float, rng_seed: int
) -> list[ClientDataset]:
    """Split every school's logs; school ``t`` uses seed stream ``(rng_seed, t)``."""
    s2s = catalog.student_to_school[logs.student]
    out = []
    for t in range(catalog.num_schools):
        out.append(
            split_client(
                logs.take(s2s == t),
                train_fraction,
                np.random.SeedSequence([rng_seed, t]),
                school=t,
                students=catalog.students_of(t),
            )
        )
    return out


def pool_clients(datasets: Sequence[ClientDataset]) -> ClientDataset:
    """Merge client datasets into one centralized dataset (school 0)."""
    train, test = Responses.empty(), Responses.empty()
    for d in datasets:
        train, test = train.concat(d.train), test.concat(d.test)
    students = np.sort(np.concatenate([d.students for d in datasets]))
    return ClientDataset(school=0, students=students, train=train, test=test)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a synthetic multi-school dataset.

    ``student_spread``, ``concept_spread`` and ``difficulty_spread`` are the
    standard deviations of the per-student ability, per-(student, concept)
    deviation and per-exercise difficulty. ``response_slope`` scales the
    logit; values below 1 make responses noisier.
    """

    schools: int
    students_per_school: int
    exercises: int
    concepts: int
    school_ability_offsets: tuple
    logs_per_student: int
    student_spread: float = 1.0
    concept_spread: float = 0.5
    difficulty_spread: float = 1.0
    response_slope: float = 1.0
    max_concepts_per_exercise: int = 3

    def __post_init__(self):
        object.__setattr__(
            self, "school_ability_offsets", tuple(float(x) for x in self.school_ability_offsets)
        )
        for name in ("schools", "students_per_school", "exercises", "concepts", "logs_per_student"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.school_ability_offsets) != self.schools:
            raise ValueError("need one ability offset per school")
        if not np.all(np.isfinite(self.school_ability_offsets)):
            raise ValueError("ability offsets must be finite")
        if self.logs_per_student > self.exercises:
            raise ValueError("logs_per_student cannot exceed the number of exercises")
        if min(self.student_spread, self.concept_spread, self.difficulty_spread) < 0:
            raise ValueError("spreads must be non-negative")
        if not self.response_slope > 0:
            raise ValueError("response_slope must be > 0")
        if self.max_concepts_per_exercise < 1:
            raise ValueError("max_concepts_per_exercise must be >= 1")


@dataclass(frozen=True)
class SyntheticData:
    catalog: EntityCatalog
    qmatrix: QMatrix
    logs: Responses
    mastery: np.ndarray  # N x K latent mastery
    difficulty: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        # unpacks as (catalog, qmatrix, logs)
        return iter((self.catalog, self.qmatrix, self.logs))


def generate_synthetic(spec: SyntheticSpec, rng_seed) -> SyntheticData:
    """Draw a dataset from a logistic response model.

    Student mastery on concept ``k`` is ``offset[school] + ability + noise_k``;
    each exercise tests 1..``max_concepts_per_exercise`` concepts and has a
    difficulty; a response is correct with probability
    ``sigmoid(slope * (mean mastery over the exercise's concepts - difficulty))``.
    """
    rng = np.random.default_rng(rng_seed)
    T, n_per, M, K = spec.schools, spec.students_per_school, spec.exercises, spec.concepts
    N = T * n_per
    school = np.repeat(np.arange(T), n_per)
    offsets = np.asarray(spec.school_ability_offsets)
    ability = rng.normal(0.0, spec.student_spread, size=N)
    mastery = (
        offsets[school][:, None]
        + ability[:, None]
        + rng.normal(0.0, spec.concept_spread, size=(N, K))
    )

    q = np.zeros((M, K), dtype=np.int8)
    max_k = min(spec.max_concepts_per_exercise, K)
    for j in range(M):
        n_k = rng.integers(1, max_k + 1)
        q[j, rng.choice(K, size=n_k, replace=False)] = 1
    difficulty = rng.normal(0.0, spec.difficulty_spread, size=M)

    student = np.repeat(np.arange(N), spec.logs_per_student)
    exercise = np.concatenate(
        [rng.choice(M, size=spec.logs_per_student, replace=False) for _ in range(N)]
    )
    qf = q.astype(np.float64)
    mean_mastery = (mastery[student] * qf[exercise]).sum(axis=1) / qf[exercise].sum(axis=1)
    p = 1.0 / (1.0 + np.exp(-spec.response_slope * (mean_mastery - difficulty[exercise])))
    correct = (rng.random(len(p)) < p).astype(np.int64)

    catalog = EntityCatalog(
        num_students=N,
        num_exercises=M,
        num_concepts=K,
        num_schools=T,
        student_to_school=school,
        student_ids=tuple(f"s{i}" for i in range(N)),
        exercise_ids=tuple(f"e{j}" for j in range(M)),
        concept_ids=tuple(f"c{k}" for k in range(K)),
        school_ids=tuple(f"school{t}" for t in range(T)),
    )
    return SyntheticData(catalog, QMatrix(q), Responses(student, exercise, correct), mastery, difficulty)


def correct_rate_by_school(logs: Responses, catalog: EntityCatalog) -> np.ndarray:
    s = catalog.student_to_school[logs.student]
    hits = np.bincount(s, weights=logs.correct, minlength=catalog.num_schools)
    n = np.bincount(s, minlength=catalog.num_schools)
    with np.errstate(invalid="ignore", divide="ignore"):
        return hits / n


# --------------------------------------------------------------------------
# writers


def write_logs(path, logs: Responses, catalog: EntityCatalog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        s2s = catalog.student_to_school
        for s, e, c in zip(logs.student.tolist(), logs.exercise.tolist(), logs.correct.tolist()):
            w.writerow(
                (catalog.school_ids[s2s[s]], catalog.student_ids[s], catalog.exercise_ids[e], c)
            )


def write_qmatrix(path, qmatrix: QMatrix, catalog: EntityCatalog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(QMATRIX_COLUMNS)
        for j, row in enumerate(qmatrix.entries):
            concepts = ";".join(catalog.concept_ids[k] for k in np.flatnonzero(row))
            w.writerow((catalog.exercise_ids[j], concepts))


def write_latents(path, mastery: np.ndarray, catalog: EntityCatalog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LATENT_COLUMNS)
        for i in range(mastery.shape[0]):
            for k in range(mastery.shape[1]):
                w.writerow((catalog.student_ids[i], catalog.concept_ids[k], repr(float(mastery[i, k]))))
